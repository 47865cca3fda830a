#include "demosynth/config.hpp"

#include <cctype>
#include <charconv>

#include "demosynth/error.hpp"
#include "demosynth/hash.hpp"
#include "demosynth/io.hpp"

namespace demosynth::config {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

bool is_bare_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

std::vector<std::string> split_dotted(const std::string& path) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    parts.push_back(trim(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start)));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (const std::string& p : parts)
    if (!is_bare_key(p)) throw ConfigError("invalid key '" + path + "'");
  return parts;
}

class ValueParser {
 public:
  ValueParser(std::string_view text, bool bare_strings) : s_(text), bare_(bare_strings) {}

  json parse_all() {
    json v = value();
    skip_ws();
    if (i_ != s_.size()) fail("unexpected trailing characters");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(what + " in value '" + std::string(s_) + "'");
  }

  void skip_ws() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t')) ++i_;
  }

  json value() {
    skip_ws();
    if (i_ >= s_.size()) fail("missing value");
    const char c = s_[i_];
    if (c == '"') return string();
    if (c == '[') return array();
    return scalar();
  }

  json string() {
    ++i_;
    std::string out;
    while (i_ < s_.size() && s_[i_] != '"') {
      if (s_[i_] == '\\') {
        if (++i_ >= s_.size()) fail("unterminated escape");
        switch (s_[i_]) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail("unsupported escape");
        }
      } else {
        out += s_[i_];
      }
      ++i_;
    }
    if (i_ >= s_.size()) fail("unterminated string");
    ++i_;
    return out;
  }

  json array() {
    ++i_;
    json out = json::array();
    skip_ws();
    if (i_ < s_.size() && s_[i_] == ']') {
      ++i_;
      return out;
    }
    while (true) {
      out.push_back(value());
      skip_ws();
      if (i_ >= s_.size()) fail("unterminated array");
      if (s_[i_] == ',') {
        ++i_;
        skip_ws();
        if (i_ < s_.size() && s_[i_] == ']') {
          ++i_;
          return out;
        }
        continue;
      }
      if (s_[i_] == ']') {
        ++i_;
        return out;
      }
      fail("expected ',' or ']'");
    }
  }

  json scalar() {
    const std::size_t start = i_;
    while (i_ < s_.size() && s_[i_] != ',' && s_[i_] != ']' && s_[i_] != ' ' && s_[i_] != '\t') ++i_;
    std::string tok(s_.substr(start, i_ - start));
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string digits;
    for (char c : tok)
      if (c != '_') digits += c;
    const bool floating = digits.find_first_of(".eE") != std::string::npos &&
                          digits.find("0x") == std::string::npos;
    if (!floating) {
      const char* b = digits.data();
      const char* e = b + digits.size();
      if (!digits.empty() && digits[0] != '-') {
        std::uint64_t u = 0;
        const char* p = b + (digits[0] == '+' ? 1 : 0);
        auto r = std::from_chars(p, e, u);
        if (r.ec == std::errc() && r.ptr == e && p != e) return u;
      } else if (!digits.empty()) {
        std::int64_t v = 0;
        auto r = std::from_chars(b, e, v);
        if (r.ec == std::errc() && r.ptr == e) return v;
      }
    } else {
      double d = 0;
      const char* b = digits.data();
      const char* e = b + digits.size();
      if (!digits.empty() && digits[0] == '+') ++b;
      auto r = std::from_chars(b, e, d);
      if (r.ec == std::errc() && r.ptr == e) return d;
    }
    if (bare_ && is_bare_key(tok)) return tok;
    fail("cannot parse '" + tok + "'");
  }

  std::string_view s_;
  bool bare_;
  std::size_t i_ = 0;
};

// Strips a # comment that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && in_str) {
      ++i;
      continue;
    }
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

json& descend(json& root, const std::vector<std::string>& path) {
  json* node = &root;
  for (const std::string& p : path) {
    json& child = (*node)[p];
    if (child.is_null()) child = json::object();
    if (!child.is_object()) throw ConfigError("key '" + p + "' is not a table");
    node = &child;
  }
  return *node;
}

bool types_compatible(const json& base, const json& v) {
  if (base.is_number_float()) return v.is_number();
  if (base.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (base.is_number_integer()) return v.is_number_integer();
  return base.type() == v.type();
}

}  // namespace

json parse_toml(const std::string& text) {
  json root = json::object();
  json* table = &root;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string raw = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("unterminated table header");
        table = &descend(root, split_dotted(line.substr(1, line.size() - 2)));
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value");
      std::vector<std::string> key = split_dotted(line.substr(0, eq));
      const std::string leaf = key.back();
      key.pop_back();
      json& target = descend(*table, key);
      if (target.contains(leaf)) throw ConfigError("duplicate key '" + leaf + "'");
      target[leaf] = ValueParser(trim(line.substr(eq + 1)), false).parse_all();
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return root;
}

void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("expected a table at '" + where + "'");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), path);
    } else {
      if (!types_compatible(slot, it.value()))
        throw ConfigError("wrong type for config key '" + path + "'");
      if (slot.is_number_float())
        slot = it.value().get<double>();
      else
        slot = it.value();
    }
  }
}

json parse_override(const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' needs key=value");
  const std::vector<std::string> key = split_dotted(assignment.substr(0, eq));
  json patch = json::object();
  json* node = &patch;
  for (std::size_t i = 0; i + 1 < key.size(); ++i) node = &((*node)[key[i]] = json::object());
  (*node)[key.back()] = ValueParser(trim(assignment.substr(eq + 1)), true).parse_all();
  return patch;
}

json to_json(const ExperimentConfig& c) { return json(c); }

ExperimentConfig from_json(const json& j) {
  json base = to_json(ExperimentConfig{});
  merge_strict(base, j);
  try {
    ExperimentConfig c = base.get<ExperimentConfig>();
    c.dataset.validate();
    c.train.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

ExperimentConfig resolve(const std::filesystem::path& file,
                         const std::vector<std::string>& overrides) {
  json base = to_json(ExperimentConfig{});
  if (!file.empty()) {
    std::string text;
    try {
      text = io::read_file(file);
    } catch (const IoError& e) {
      throw ConfigError(std::string("cannot read config file: ") + e.what());
    }
    try {
      merge_strict(base, parse_toml(text));
    } catch (const ConfigError& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
  }
  for (const std::string& o : overrides) merge_strict(base, parse_override(o));
  return from_json(base);
}

std::string config_hash(const ExperimentConfig& c) { return sha256_hex(to_json(c).dump()); }

}  // namespace demosynth::config
