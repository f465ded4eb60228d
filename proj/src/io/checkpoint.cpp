#include "msy/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace msy {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'Y', 'C', 'K', 'P', 'T', '1'};

struct RawTensor {
  Shape shape;
  std::vector<float> data;
};

struct RawFile {
  nlohmann::json header;
  std::map<std::string, RawTensor> tensors;
};

nlohmann::json shape_json(const Shape& s) { return {s.n, s.c, s.h, s.w}; }

RawFile read_raw(const std::filesystem::path& path, bool with_data) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint header in " + path.string());
  RawFile f;
  f.header = nlohmann::json::parse(text);
  if (!with_data) return f;
  for (const auto& e : f.header.at("tensors")) {
    const auto dims = e.at("shape").get<std::vector<int>>();
    RawTensor t{Shape{dims.at(0), dims.at(1), dims.at(2), dims.at(3)}, {}};
    t.data.resize(t.shape.numel());
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw CheckpointError("truncated tensor '" + e.at("name").get<std::string>() + "'");
    f.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return f;
}

template <typename T>
void assign(Tensor<T>& dst, const RawTensor& src, const std::string& name) {
  if (!(dst.shape() == src.shape)) {
    throw CheckpointError("shape mismatch for '" + name + "': model " + dst.shape().str() + ", file " +
                          src.shape.str());
  }
  for (std::size_t i = 0; i < src.data.size(); ++i) dst[i] = static_cast<T>(src.data[i]);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const nlohmann::json& meta) {
  const auto& store = model.store();
  std::vector<std::pair<std::string, const Tensor<float>*>> entries;
  for (const auto& p : store.params()) entries.emplace_back(p.name, &p.var.value());
  for (const auto& b : store.buffers()) entries.emplace_back(b.first, b.second.get());
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : entries) index.push_back({{"name", name}, {"shape", shape_json(t->shape())}});
  nlohmann::json header = {{"spec", model.spec()}, {"meta", meta}, {"tensors", index}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp);
    out.write(kMagic, 8);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : entries) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->numel() * sizeof(float)));
    }
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) { return read_raw(path, false).header; }

void load_weights(const std::filesystem::path& path, Model<float>& model) {
  const RawFile f = read_raw(path, true);
  auto& store = model.store();
  std::size_t expected = store.params().size() + store.buffers().size();
  if (f.tensors.size() != expected) {
    throw CheckpointError("checkpoint holds " + std::to_string(f.tensors.size()) + " tensors, model expects " +
                          std::to_string(expected));
  }
  for (auto& p : store.params()) {
    auto it = f.tensors.find(p.name);
    if (it == f.tensors.end()) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    assign(p.var.value(), it->second, p.name);
  }
  for (const auto& b : store.buffers()) {
    auto it = f.tensors.find(b.first);
    if (it == f.tensors.end()) throw CheckpointError("checkpoint lacks buffer '" + b.first + "'");
    assign(*b.second, it->second, b.first);
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const nlohmann::json header = read_checkpoint_header(path);
  ArchitectureSpec spec = header.at("spec").get<ArchitectureSpec>();
  // Pretrained weights are already folded into the stored tensors.
  spec.pretrained.clear();
  LoadedCheckpoint out{std::make_unique<Model<float>>(spec), header.value("meta", nlohmann::json::object())};
  load_weights(path, *out.model);
  return out;
}

template <typename T>
void load_encoder_weights(ParamStore<T>& store, const std::string& prefix, const std::filesystem::path& path) {
  const RawFile f = read_raw(path, true);
  int copied = 0;
  for (const auto& [name, t] : f.tensors) {
    if (name.rfind("encoder.", 0) != 0) continue;
    const std::string target = prefix + name.substr(7);
    if (auto* p = store.find(target)) {
      assign(p->var.value(), t, target);
      ++copied;
    } else if (auto* b = store.find_buffer(target)) {
      assign(*b, t, target);
      ++copied;
    }
  }
  if (copied == 0) throw CheckpointError("no encoder.* tensors in " + path.string() + " match '" + prefix + "'");
}

template void load_encoder_weights(ParamStore<float>&, const std::string&, const std::filesystem::path&);
template void load_encoder_weights(ParamStore<double>&, const std::string&, const std::filesystem::path&);

}  // namespace msy
