#include "cutkit/jsonl.hpp"

#include <fstream>

namespace cutkit::jsonl {

std::vector<nlohmann::json> load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + " line " + std::to_string(lineno) +
                      ": malformed JSON: " + e.what());
    }
    if (!rows.back().is_object()) {
      throw DataError(path.string() + " line " + std::to_string(lineno) + ": expected a JSON object");
    }
  }
  return rows;
}

void save(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  for (const auto& row : rows) out << dump_lossy(row) << '\n';
  out.flush();
  if (!out) throw RuntimeError("failed writing " + path.string());
}

std::string dump_lossy(const nlohmann::json& row, int indent) {
  return row.dump(indent, ' ', false, nlohmann::json::error_handler_t::replace);
}

void append(const std::filesystem::path& path, const nlohmann::json& row) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for appending");
  out << dump_lossy(row) << '\n';
  out.flush();
  if (!out) throw RuntimeError("failed writing " + path.string());
}

}  // namespace cutkit::jsonl
