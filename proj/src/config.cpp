#include "spinelab/config.hpp"

#include <fstream>
#include <sstream>

#include "spinelab/error.hpp"

namespace spinelab {

namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_text(buf.str(), path);
}

KeyValueConfig KeyValueConfig::parse_text(const std::string& text,
                                          const std::string& origin) {
  KeyValueConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": expected `key = value`");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
    cfg.values_[key] = value;
  }
  return cfg;
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& dflt) const {
  auto v = get(key);
  return v ? *v : dflt;
}

double KeyValueConfig::get_double(const std::string& key, double dflt) const {
  auto v = get(key);
  if (!v) return dflt;
  try {
    size_t pos = 0;
    const double d = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': not a number: '" + *v + "'");
  }
}

int64_t KeyValueConfig::get_int(const std::string& key, int64_t dflt) const {
  auto v = get(key);
  if (!v) return dflt;
  try {
    size_t pos = 0;
    const int64_t i = std::stoll(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing");
    return i;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': not an integer: '" + *v + "'");
  }
}

uint64_t KeyValueConfig::get_u64(const std::string& key, uint64_t dflt) const {
  auto v = get(key);
  if (!v) return dflt;
  try {
    size_t pos = 0;
    const uint64_t i = std::stoull(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing");
    return i;
  } catch (const std::exception&) {
    throw FormatError("config key '" + key + "': not an integer: '" + *v + "'");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool dflt) const {
  auto v = get(key);
  if (!v) return dflt;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw FormatError("config key '" + key + "': not a boolean: '" + *v + "'");
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

void KeyValueConfig::set_double(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  values_[key] = os.str();
}

void KeyValueConfig::set_int(const std::string& key, int64_t value) {
  values_[key] = std::to_string(value);
}

void KeyValueConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write config: " + path);
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
}

}  // namespace spinelab
