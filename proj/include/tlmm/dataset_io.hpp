#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tlmm/errors.hpp"
#include "tlmm/ltf_io.hpp"
#include "tlmm/model.hpp"

namespace tlmm {

namespace csv {

// One RFC-4180 record per line; quoted fields may contain commas and doubled quotes.
inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  if (quoted) throw DataError("unterminated quoted field");
  out.push_back(cur);
  return out;
}

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace csv

struct LoadOptions {
  std::string mask_path;  // optional LTF1 label volume
  Index n_groups = 0;     // 0: largest group label in the manifest
};

inline LongitudinalDataset load_dataset(const std::string& manifest, const LoadOptions& opt = {}) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest);
  const fs::path base = fs::path(manifest).parent_path();
  std::string line;
  if (!std::getline(in, line)) throw DataError(manifest + ": empty manifest");
  auto header = csv::split(line);
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);
  if (header != std::vector<std::string>{"subject_id", "group", "time", "tensor_path"})
    throw DataError(manifest + ": header must be subject_id,group,time,tensor_path");

  struct Row {
    std::string id;
    Index group;
    double time;
    DenseTensor y;
  };
  std::vector<Row> rows;
  std::set<std::pair<std::string, double>> seen;
  std::map<std::string, Index> group_of;
  Dims grid;
  Index row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::string where = manifest + " row " + std::to_string(row);
    std::vector<std::string> f;
    try {
      f = csv::split(line);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (f.size() != 4) throw DataError(where + ": expected 4 fields, got " + std::to_string(f.size()));
    Row r;
    r.id = f[0];
    if (r.id.empty()) throw DataError(where + ": empty subject_id");
    long long g = 0;
    const auto gr = std::from_chars(f[1].data(), f[1].data() + f[1].size(), g);
    if (gr.ec != std::errc() || gr.ptr != f[1].data() + f[1].size() || g < 1)
      throw DataError(where + ": bad group '" + f[1] + "' (expected an integer >= 1)");
    r.group = static_cast<Index>(g - 1);
    const auto tr = std::from_chars(f[2].data(), f[2].data() + f[2].size(), r.time);
    if (tr.ec != std::errc() || tr.ptr != f[2].data() + f[2].size() || !std::isfinite(r.time) || r.time < 0.0)
      throw DataError(where + ": bad time '" + f[2] + "'");
    const fs::path tp = fs::path(f[3]).is_absolute() ? fs::path(f[3]) : base / f[3];
    if (!fs::exists(tp)) throw DataError(where + ": missing tensor file " + tp.string());
    try {
      r.y = read_ltf(tp.string());
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (r.y.order() != 3) throw DataError(where + ": tensor must have 3 dims, got " + dims_string(r.y.dims()));
    if (grid.empty()) grid = r.y.dims();
    if (r.y.dims() != grid)
      throw DataError(where + ": tensor dims " + dims_string(r.y.dims()) + " differ from " + dims_string(grid));
    if (!r.y.vec().allFinite()) throw DataError(where + ": tensor contains NaN or Inf");
    if (!seen.emplace(r.id, r.time).second) throw DataError(where + ": duplicate subject/time row for " + r.id);
    auto [it, fresh] = group_of.emplace(r.id, r.group);
    if (!fresh && it->second != r.group) throw DataError(where + ": subject " + r.id + " changes group");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError(manifest + ": no data rows");

  LongitudinalDataset d;
  d.grid = grid;
  Index gmax = 0;
  double tmax = 0.0;
  for (const auto& r : rows) {
    gmax = std::max(gmax, r.group + 1);
    tmax = std::max(tmax, r.time);
  }
  d.n_groups = opt.n_groups > 0 ? opt.n_groups : gmax;
  if (gmax > d.n_groups) throw DataError(manifest + ": group label " + std::to_string(gmax) + " exceeds n_groups");
  const double scale = tmax > 1.0 ? tmax : 1.0;

  std::map<std::string, std::size_t> pos;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto [it, fresh] = pos.emplace(rows[k].id, d.subjects.size());
    if (fresh) {
      Subject s;
      s.id = rows[k].id;
      s.group = rows[k].group;
      d.subjects.push_back(std::move(s));
      members.emplace_back();
    }
    members[it->second].push_back(k);
  }
  for (std::size_t s = 0; s < d.subjects.size(); ++s) {
    auto& m = members[s];
    std::stable_sort(m.begin(), m.end(), [&](std::size_t a, std::size_t b) { return rows[a].time < rows[b].time; });
    for (std::size_t k : m) {
      d.subjects[s].times.push_back(rows[k].time / scale);
      d.subjects[s].obs.push_back(std::move(rows[k].y));
    }
  }
  if (!opt.mask_path.empty()) {
    LabelVolume mask = read_label_ltf(opt.mask_path);
    if (mask.dims != grid) throw DataError(opt.mask_path + ": mask dims do not match the grid");
    d.mask = std::move(mask);
  }
  d.validate();
  return d;
}

// Writes dir/manifest.csv and dir/tensors/*.ltf (plus dir/mask.ltf when present); returns the manifest path.
inline std::string save_dataset(const LongitudinalDataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  d.validate();
  fs::create_directories(fs::path(dir) / "tensors");
  const std::string manifest = (fs::path(dir) / "manifest.csv").string();
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write " + manifest);
  out << "subject_id,group,time,tensor_path\n";
  for (std::size_t i = 0; i < d.subjects.size(); ++i) {
    const Subject& s = d.subjects[i];
    for (std::size_t j = 0; j < s.obs.size(); ++j) {
      const std::string rel = "tensors/s" + std::to_string(i) + "_v" + std::to_string(j) + ".ltf";
      write_ltf((fs::path(dir) / rel).string(), s.obs[j]);
      out << csv::quote(s.id) << ',' << s.group + 1 << ',' << csv::format_double(s.times[j]) << ',' << rel << '\n';
    }
  }
  if (d.mask) write_label_ltf((fs::path(dir) / "mask.ltf").string(), *d.mask);
  if (!out) throw DataError("write failed for " + manifest);
  return manifest;
}

}  // namespace tlmm
