#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace slpmt::detail {

using json = nlohmann::json;

// Object reader that rejects keys nobody asked for.
class StrictObject {
 public:
  StrictObject(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw std::invalid_argument(context_ + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& at(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw std::invalid_argument(context_ + ": missing key '" + key + "'");
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key) {
    try {
      return at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(context_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  T get_or(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return get<T>(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw std::invalid_argument(context_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

inline json parse_json(std::string_view text, const std::string& context) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(context + ": malformed JSON: " + e.what());
  }
}

}  // namespace slpmt::detail
