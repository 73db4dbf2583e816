#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ddpore::dataprep {

// 0-based pixel coordinate.
struct Pore {
  std::int64_t row = 0;
  std::int64_t col = 0;
  auto operator<=>(const Pore&) const = default;
};

using PoreList = std::vector<Pore>;

// ".pores" text: one "row col" pair per line, whitespace separated. Blank
// lines are ignored. Malformed lines raise FormatError naming the line,
// repeated coordinates raise FormatError, and coordinates outside
// rows x cols (when given) raise BoundsError.
PoreList parse_pores(const std::string& text, std::optional<std::int64_t> rows = {},
                     std::optional<std::int64_t> cols = {});
PoreList load_ground_truth(const std::filesystem::path& path,
                           std::optional<std::int64_t> rows = {},
                           std::optional<std::int64_t> cols = {});

std::string format_pores(const PoreList& pores);
void save_pores(const PoreList& pores, const std::filesystem::path& path);

// Throws BoundsError for the first coordinate outside rows x cols.
void check_in_bounds(const PoreList& pores, std::int64_t rows, std::int64_t cols);

}  // namespace ddpore::dataprep
