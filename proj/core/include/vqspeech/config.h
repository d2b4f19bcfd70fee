// Copyright 2026 The vqspeech Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef VQSPEECH_CONFIG_H_
#define VQSPEECH_CONFIG_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vqspeech {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string doc;
};

// Flat key=value configuration with dotted keys. Every key is registered
// with a default; setting an unknown key is a kConfig error.
class Config {
 public:
  Config();

  static const std::vector<ConfigKey>& keys();
  static std::string valid_keys();

  void set(std::string_view key, std::string_view value);
  // Parses "key=value".
  void apply_override(std::string_view assignment);
  // UTF-8 key=value lines; blank lines and '#' comments are ignored.
  void load_file(const std::filesystem::path& path);
  void load_text(std::string_view text, std::string_view origin = "<text>");

  const std::string& get(std::string_view key) const;
  int get_int(std::string_view key) const;
  int64_t get_int64(std::string_view key) const;
  double get_double(std::string_view key) const;
  bool get_bool(std::string_view key) const;
  std::vector<int> get_int_list(std::string_view key) const;

  // Sorted "key=value\n" lines; the hash covers exactly this text.
  std::string canonical() const;
  uint64_t hash() const;

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

// "vqspeech <version> config_hash=<hex> seed=<seed>"
std::string provenance(const Config& config);

}  // namespace vqspeech

#endif  // VQSPEECH_CONFIG_H_
