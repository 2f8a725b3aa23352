#include "pbal/dataset_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace pbal {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError(fmt::format("cannot write {}", path.string()));
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(fmt::format("cannot read {}", path.string()));
  return in;
}

void write_meta(std::ostream& out, const Metadata& meta) {
  for (const auto& [k, v] : meta) out << "# " << k << ": " << v << '\n';
}

/// Consumes comment lines and returns the first non-comment line.
std::string skip_meta(std::istream& in, Metadata* meta) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) != 0) return line;
    if (meta) {
      const auto colon = line.find(": ", 2);
      if (colon == std::string::npos) continue;
      meta->emplace_back(line.substr(2, colon - 2), line.substr(colon + 2));
    }
  }
  return {};
}

const std::string* find_meta(const Metadata& meta, const std::string& key) {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

std::uint64_t parse_u64(const std::string& text, const fs::path& path) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw DatasetError(fmt::format("{}: bad integer '{}'", path.string(), text));
  return v;
}

}  // namespace

std::string format_double(double v) { return fmt::format("{}", v); }

double parse_double(const std::string& text) {
  if (text.empty()) throw DatasetError("empty numeric field");
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size())
    throw DatasetError(fmt::format("bad number '{}'", text));
  return v;
}

void write_episode_csv(const Episode& ep, const fs::path& path, const Metadata& meta) {
  auto out = open_out(path);
  const int n_m = ep.states.empty() ? 0 : ep.states.front().n_muscles();
  Metadata all{{"label", ep.label},
               {"seed", std::to_string(ep.seed)},
               {"policy", std::string(to_string(ep.policy))},
               {"fell", ep.fell ? "1" : "0"},
               {"n_muscles", std::to_string(n_m)}};
  all.insert(all.end(), meta.begin(), meta.end());
  write_meta(out, all);

  out << "tick,t,z_x,z_y";
  for (int i = 0; i < n_m; ++i) out << ",f" << i;
  for (int i = 0; i < n_m; ++i) out << ",l" << i;
  out << ",theta_ref\n";
  for (std::size_t t = 0; t < ep.size(); ++t) {
    const auto& s = ep.states[t];
    out << t << ',' << format_double(static_cast<double>(t) * kTickSeconds) << ','
        << format_double(s.z.x()) << ',' << format_double(s.z.y());
    for (int i = 0; i < n_m; ++i) out << ',' << format_double(s.f[i]);
    for (int i = 0; i < n_m; ++i) out << ',' << format_double(s.l[i]);
    out << ',' << format_double(ep.commands[t]) << '\n';
  }
  if (!out) throw DatasetError(fmt::format("write failed for {}", path.string()));
}

Episode read_episode_csv(const fs::path& path) {
  auto in = open_in(path);
  Metadata meta;
  const std::string header = skip_meta(in, &meta);
  const auto* label = find_meta(meta, "label");
  const auto* seed = find_meta(meta, "seed");
  const auto* policy = find_meta(meta, "policy");
  const auto* n_muscles = find_meta(meta, "n_muscles");
  if (!label || !seed || !policy || !n_muscles)
    throw DatasetError(fmt::format("{}: missing label/seed/policy/n_muscles header", path.string()));

  Episode ep;
  ep.label = *label;
  ep.seed = parse_u64(*seed, path);
  ep.policy = parse_policy(*policy);
  if (const auto* fell = find_meta(meta, "fell")) ep.fell = *fell == "1";
  const int n_m = static_cast<int>(parse_u64(*n_muscles, path));
  const std::size_t cols = 5 + 2 * static_cast<std::size_t>(n_m);
  if (split_csv(header).size() != cols)
    throw DatasetError(fmt::format("{}: header has wrong column count", path.string()));

  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != cols)
      throw DatasetError(fmt::format("{}: row {} has {} columns, expected {}", path.string(),
                                     ep.size(), cells.size(), cols));
    auto s = SensorState::zeros(n_m);
    s.z = {parse_double(cells[2]), parse_double(cells[3])};
    for (int i = 0; i < n_m; ++i) {
      s.f[i] = parse_double(cells[4 + i]);
      s.l[i] = parse_double(cells[4 + n_m + i]);
    }
    ep.states.push_back(std::move(s));
    ep.commands.push_back(parse_double(cells.back()));
  }
  return ep;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path,
                    const Metadata& meta) {
  auto out = open_out(path);
  write_meta(out, meta);
  out << "file,label,policy,seed,ticks,fell,error\n";
  for (const auto& e : entries) {
    std::string error = e.error;
    for (char& ch : error)
      if (ch == ',' || ch == '\n') ch = ';';
    out << e.file << ',' << e.label << ',' << to_string(e.policy) << ',' << e.seed << ','
        << e.ticks << ',' << (e.fell ? 1 : 0) << ',' << error << '\n';
  }
  if (!out) throw DatasetError(fmt::format("write failed for {}", path.string()));
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  auto in = open_in(path);
  const std::string header = skip_meta(in, nullptr);
  if (header != "file,label,policy,seed,ticks,fell,error")
    throw DatasetError(fmt::format("{}: not a dataset manifest", path.string()));
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != 7) throw DatasetError(fmt::format("{}: malformed row", path.string()));
    ManifestEntry e;
    e.file = cells[0];
    e.label = cells[1];
    e.policy = parse_policy(cells[2]);
    e.seed = parse_u64(cells[3], path);
    e.ticks = parse_u64(cells[4], path);
    e.fell = cells[5] == "1";
    e.error = cells[6];
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<Episode> load_dataset(const fs::path& manifest) {
  std::vector<Episode> out;
  for (const auto& e : read_manifest(manifest)) {
    if (!e.error.empty() || e.file.empty()) continue;
    out.push_back(read_episode_csv(manifest.parent_path() / e.file));
    if (out.back().size() != e.ticks)
      throw DatasetError(fmt::format("{}: manifest says {} ticks, file has {}", e.file, e.ticks,
                                     out.back().size()));
  }
  return out;
}

Metadata read_metadata(const fs::path& path) {
  auto in = open_in(path);
  Metadata meta;
  skip_meta(in, &meta);
  return meta;
}

}  // namespace pbal
