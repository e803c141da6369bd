#pragma once

// Small helpers shared by the text formats. Not installed.

#include <Eigen/Core>

#include <charconv>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace odeest::csv {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Accepts "inf", "-inf" and "nan" in addition to ordinary numbers.
inline bool parse_double(std::string_view s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

inline Eigen::VectorXd parse_vector(std::string_view s) {
  const auto fields = split(s);
  Eigen::VectorXd v(static_cast<Eigen::Index>(fields.size()));
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (!parse_double(fields[i], v(static_cast<Eigen::Index>(i))))
      throw std::invalid_argument("malformed number '" + fields[i] + "'");
  }
  return v;
}

inline std::string join(const Eigen::VectorXd& v, char sep = ',') {
  std::ostringstream out;
  out.precision(17);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out << sep;
    out << v(i);
  }
  return out.str();
}

}  // namespace odeest::csv
