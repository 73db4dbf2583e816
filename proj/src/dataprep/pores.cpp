#include "ddpore/dataprep/pores.hpp"

#include <charconv>
#include <set>
#include <sstream>

#include "ddpore/error.hpp"
#include "ddpore/io.hpp"

namespace ddpore::dataprep {

namespace {

bool parse_int(std::string_view token, std::int64_t& out) {
  const char* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

void check_in_bounds(const PoreList& pores, std::int64_t rows, std::int64_t cols) {
  for (const Pore& p : pores) {
    if (p.row < 0 || p.col < 0 || p.row >= rows || p.col >= cols) {
      throw BoundsError("pore (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                        ") lies outside the " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " image");
    }
  }
}

PoreList parse_pores(const std::string& text, std::optional<std::int64_t> rows,
                     std::optional<std::int64_t> cols) {
  PoreList pores;
  std::set<Pore> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string t; fields >> t;) tokens.push_back(t);
    if (tokens.empty()) continue;
    Pore p;
    if (tokens.size() != 2 || !parse_int(tokens[0], p.row) || !parse_int(tokens[1], p.col)) {
      throw FormatError("line " + std::to_string(line_no) + ": expected two integers 'row col', got '" +
                        line + "'");
    }
    if (!seen.insert(p).second) {
      throw FormatError("line " + std::to_string(line_no) + ": duplicate pore (" +
                        std::to_string(p.row) + ", " + std::to_string(p.col) + ")");
    }
    pores.push_back(p);
  }
  if (rows && cols) check_in_bounds(pores, *rows, *cols);
  return pores;
}

PoreList load_ground_truth(const std::filesystem::path& path, std::optional<std::int64_t> rows,
                           std::optional<std::int64_t> cols) {
  try {
    return parse_pores(read_text_file(path), rows, cols);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const BoundsError& e) {
    throw BoundsError(path.string() + ": " + e.what());
  }
}

std::string format_pores(const PoreList& pores) {
  std::string out;
  for (const Pore& p : pores) out += std::to_string(p.row) + " " + std::to_string(p.col) + "\n";
  return out;
}

void save_pores(const PoreList& pores, const std::filesystem::path& path) {
  write_file_atomic(path, format_pores(pores));
}

}  // namespace ddpore::dataprep
