#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ldsim {

// Shortest decimal that round-trips to the same double.
std::string format_double(double v);

// Strict parse; throws InvalidArgument on trailing garbage.
double parse_double(std::string_view s);
long long parse_int(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);

}  // namespace ldsim
