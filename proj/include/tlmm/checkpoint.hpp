#pragma once

#include <json.hpp>

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "tlmm/errors.hpp"
#include "tlmm/ltf_io.hpp"
#include "tlmm/model.hpp"

// LTMC container: magic "LTMC", u32 version, u64 manifest length, JSON manifest, then LTF1
// blobs back to back. The manifest lists every blob as {name, offset, length} relative to
// the end of the manifest, plus a free-form "meta" object.
namespace tlmm {

class Container {
public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, DenseTensor t) {
    if (!index_.emplace(name, entries_.size()).second) throw DataError("duplicate container entry " + name);
    entries_.emplace_back(name, std::move(t));
  }
  void put_matrix(const std::string& name, const Eigen::MatrixXd& m) {
    if (m.size() == 0) throw DataError("empty matrix for container entry " + name);
    DenseTensor t({m.rows(), m.cols()});
    Eigen::Map<RowMajorMatrix>(t.data(), m.rows(), m.cols()) = m;
    put(name, std::move(t));
  }
  void put_scalars(const std::string& name, const std::vector<double>& v) { put(name, DenseTensor({static_cast<Index>(v.size())}, v)); }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const DenseTensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("container has no entry " + name);
    return entries_[it->second].second;
  }
  Eigen::MatrixXd get_matrix(const std::string& name) const {
    const DenseTensor& t = get(name);
    if (t.order() != 2) throw DataError("container entry " + name + " is not a matrix");
    return Eigen::Map<const RowMajorMatrix>(t.data(), t.dim(0), t.dim(1));
  }
  const std::vector<std::pair<std::string, DenseTensor>>& entries() const { return entries_; }

  std::vector<unsigned char> encode() const {
    nlohmann::json man;
    man["meta"] = meta;
    man["blobs"] = nlohmann::json::array();
    std::vector<unsigned char> blobs;
    for (const auto& [name, t] : entries_) {
      const auto b = encode_ltf(t);
      man["blobs"].push_back({{"name", name}, {"offset", blobs.size()}, {"length", b.size()}});
      blobs.insert(blobs.end(), b.begin(), b.end());
    }
    const std::string ms = man.dump();
    std::vector<unsigned char> out = {'L', 'T', 'M', 'C'};
    ltf_detail::put_u32(out, 1);
    ltf_detail::put_u64(out, ms.size());
    out.insert(out.end(), ms.begin(), ms.end());
    out.insert(out.end(), blobs.begin(), blobs.end());
    return out;
  }

  static Container decode(const std::vector<unsigned char>& buf, const std::string& where = "LTMC") {
    if (buf.size() < 16 || std::memcmp(buf.data(), "LTMC", 4) != 0) throw DataError(where + ": bad magic, expected LTMC");
    if (ltf_detail::get_u32(buf.data() + 4) != 1) throw DataError(where + ": unsupported container version");
    const std::uint64_t ml = ltf_detail::get_u64(buf.data() + 8);
    if (buf.size() < 16 + ml) throw DataError(where + ": truncated manifest");
    nlohmann::json man;
    try {
      man = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(ml));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": malformed manifest: " + e.what());
    }
    Container c;
    c.meta = man.value("meta", nlohmann::json::object());
    const std::size_t base = 16 + ml;
    for (const auto& b : man.at("blobs")) {
      const std::size_t off = b.at("offset"), len = b.at("length");
      if (base + off + len > buf.size()) throw DataError(where + ": blob " + b.at("name").get<std::string>() + " is truncated");
      std::vector<unsigned char> blob(buf.begin() + static_cast<std::ptrdiff_t>(base + off),
                                      buf.begin() + static_cast<std::ptrdiff_t>(base + off + len));
      c.put(b.at("name"), decode_ltf(blob, where + ":" + b.at("name").get<std::string>()));
    }
    return c;
  }

  void write(const std::string& path) const { ltf_detail::write_file(path, encode()); }
  static Container read(const std::string& path) { return decode(ltf_detail::read_file(path), path); }

private:
  std::vector<std::pair<std::string, DenseTensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline void save_component(Container& c, const std::string& p, const ComponentState& s) {
  c.put_scalars(p + "scalars", {s.tau2, s.mean_core_var});
  c.put(p + "mean_core", s.mean_core);
  c.put(p + "cell_var", s.cell_var);
  c.put_scalars(p + "n_cores", {static_cast<double>(s.cores.size())});
  for (std::size_t i = 0; i < s.cores.size(); ++i) c.put(p + "core/" + std::to_string(i), s.cores[i]);
  c.put_scalars(p + "n_modes", {static_cast<double>(s.modes.size())});
  for (std::size_t m = 0; m < s.modes.size(); ++m) {
    const auto& f = s.modes[m];
    const std::string q = p + "mode/" + std::to_string(m) + "/";
    c.put_matrix(q + "columns", f.columns);
    c.put_scalars(q + "varsigma", std::vector<double>(f.shrink.varsigma.data(), f.shrink.varsigma.data() + f.shrink.size()));
    c.put_scalars(q + "q", {static_cast<double>(f.gamma.size())});
    for (std::size_t k = 0; k < f.gamma.size(); ++k) c.put_matrix(q + "gamma/" + std::to_string(k), f.gamma[k]);
  }
}

inline ComponentState load_component(const Container& c, const std::string& p) {
  ComponentState s;
  const DenseTensor& sc = c.get(p + "scalars");
  s.tau2 = sc[0];
  s.mean_core_var = sc[1];
  s.mean_core = c.get(p + "mean_core");
  s.cell_var = c.get(p + "cell_var");
  const auto n = static_cast<std::size_t>(c.get(p + "n_cores")[0]);
  for (std::size_t i = 0; i < n; ++i) s.cores.push_back(c.get(p + "core/" + std::to_string(i)));
  const auto nm = static_cast<std::size_t>(c.get(p + "n_modes")[0]);
  for (std::size_t m = 0; m < nm; ++m) {
    const std::string q = p + "mode/" + std::to_string(m) + "/";
    ModeFactor f;
    f.columns = c.get_matrix(q + "columns");
    f.shrink.varsigma = c.get(q + "varsigma").vec();
    const auto nq = static_cast<std::size_t>(c.get(q + "q")[0]);
    for (std::size_t k = 0; k < nq; ++k) f.gamma.push_back(c.get_matrix(q + "gamma/" + std::to_string(k)));
    s.modes.push_back(std::move(f));
  }
  return s;
}

inline void save_state(Container& c, const std::string& prefix, const ModelState& st) {
  c.put_scalars(prefix + "state", {st.structure == Structure::cp ? 1.0 : 0.0, st.sigma2_eps,
                                   static_cast<double>(st.iteration)});
  save_component(c, prefix + "alpha/", st.alpha);
  save_component(c, prefix + "beta/", st.beta);
}

inline ModelState load_state(const Container& c, const std::string& prefix) {
  ModelState st;
  const DenseTensor& s = c.get(prefix + "state");
  st.structure = s[0] != 0.0 ? Structure::cp : Structure::tucker;
  st.sigma2_eps = s[1];
  st.iteration = static_cast<std::uint64_t>(s[2]);
  st.alpha = load_component(c, prefix + "alpha/");
  st.beta = load_component(c, prefix + "beta/");
  return st;
}

inline void write_checkpoint(const std::string& path, const ModelState& st, const nlohmann::json& meta = {}) {
  Container c;
  c.meta = meta.is_null() ? nlohmann::json::object() : meta;
  c.meta["ranks_alpha"] = st.alpha.ranks();
  c.meta["ranks_beta"] = st.beta.ranks();
  c.meta["iteration"] = st.iteration;
  save_state(c, "", st);
  c.write(path);
}

inline ModelState read_checkpoint(const std::string& path) { return load_state(Container::read(path), ""); }

}  // namespace tlmm
