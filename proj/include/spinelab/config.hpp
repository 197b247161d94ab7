#ifndef SPINELAB_CONFIG_HPP_
#define SPINELAB_CONFIG_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>

namespace spinelab {

/// Flat `key = value` text configuration with '#' comments. Keys are
/// dot-namespaced (e.g. optimizer.learning_rate). Later assignments win.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_text(const std::string& text,
                                   const std::string& origin = "<memory>");

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::optional<std::string> get(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& dflt) const;
  double get_double(const std::string& key, double dflt) const;
  int64_t get_int(const std::string& key, int64_t dflt) const;
  uint64_t get_u64(const std::string& key, uint64_t dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;

  void set(const std::string& key, const std::string& value);
  void set_double(const std::string& key, double value);
  void set_int(const std::string& key, int64_t value);

  void save(const std::string& path) const;
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace spinelab

#endif  // SPINELAB_CONFIG_HPP_
