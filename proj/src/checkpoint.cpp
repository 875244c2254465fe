#include "cseg/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cseg {

using nlohmann::json;

namespace {

constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { io_detail::put_u32(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) {
  io_detail::put_u32(os, static_cast<std::uint32_t>(v));
  io_detail::put_u32(os, static_cast<std::uint32_t>(v >> 32));
}
std::uint64_t read_u64(std::istream& is) {
  const std::uint64_t lo = io_detail::get_u32(is);
  const std::uint64_t hi = io_detail::get_u32(is);
  return lo | (hi << 32);
}

void save_container(const std::string& path, const json& manifest, const std::vector<Tensor*>& tensors) {
  std::ostringstream body;
  body.write("CSCK", 4);
  write_u32(body, kVersion);
  const std::string m = manifest.dump();
  write_u64(body, m.size());
  body.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (Tensor* t : tensors) write_tensor(body, *t);
  const std::string bytes = body.str();
  const std::uint64_t sum = fnv1a64(bytes.data(), bytes.size());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for write: " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  write_u64(os, sum);
  if (!os) throw IoError("checkpoint write failed: " + path);
}

json load_container(const std::string& path, std::vector<Tensor>& tensors_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  std::ostringstream all;
  all << is.rdbuf();
  const std::string bytes = all.str();
  if (bytes.size() < 24) throw IoError("checkpoint truncated: " + path);
  const std::string body = bytes.substr(0, bytes.size() - 8);
  std::istringstream footer(bytes.substr(bytes.size() - 8));
  const std::uint64_t expect = read_u64(footer);
  if (fnv1a64(body.data(), body.size()) != expect) throw IoError("checkpoint checksum mismatch: " + path);

  std::istringstream bs(body);
  char magic[4];
  bs.read(magic, 4);
  if (std::memcmp(magic, "CSCK", 4) != 0) throw IoError("bad checkpoint magic: " + path);
  if (io_detail::get_u32(bs) != kVersion) throw IoError("unsupported checkpoint version: " + path);
  const std::uint64_t mlen = read_u64(bs);
  std::string m(mlen, '\0');
  bs.read(m.data(), static_cast<std::streamsize>(mlen));
  json manifest = json::parse(m);
  while (bs.peek() != std::char_traits<char>::eof()) tensors_out.push_back(read_tensor<float>(bs));
  return manifest;
}

void fill_state(std::vector<Tensor*> dst, std::vector<Tensor>& src) {
  if (dst.size() != src.size()) throw IoError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->shape() != src[i].shape()) throw IoError("checkpoint tensor shape mismatch");
    *dst[i] = std::move(src[i]);
  }
}

std::vector<std::string> kinds_to_names(const std::vector<KernelKind>& kinds) {
  std::vector<std::string> out;
  for (KernelKind k : kinds) out.push_back(kernel_kind_name(k));
  return out;
}

std::vector<KernelKind> kinds_from_names(const std::vector<std::string>& names) {
  std::vector<KernelKind> out;
  for (const auto& n : names) out.push_back(kernel_kind_from_name(n));
  return out;
}

}  // namespace

void save_encoder(const std::string& path, Encoder& enc) {
  json m;
  m["type"] = "encoder";
  m["widths"] = enc.widths();
  m["frozen"] = enc.frozen();
  save_container(path, m, enc.state_tensors());
}

Encoder load_encoder(const std::string& path) {
  std::vector<Tensor> tensors;
  json m = load_container(path, tensors);
  if (m.at("type") != "encoder") throw IoError("not an encoder checkpoint: " + path);
  Encoder enc = build_encoder<float>(m.at("widths").get<std::vector<int>>(), 0);
  fill_state(enc.state_tensors(), tensors);
  if (m.at("frozen").get<bool>()) enc.freeze();
  return enc;
}

void save_decoder(const std::string& path, Decoder& dec, const std::vector<int>& encoder_widths) {
  json m;
  m["type"] = "decoder";
  m["encoder_widths"] = encoder_widths;
  m["n_classes"] = dec.n_classes();
  m["kinds"] = kinds_to_names(dec.kinds());
  std::vector<int> frozen_stats;
  for (auto& b : dec.blocks()) frozen_stats.push_back(block_frozen_stats(b) ? 1 : 0);
  m["frozen_stats"] = frozen_stats;
  save_container(path, m, dec.state_tensors());
}

Decoder load_decoder(const std::string& path) {
  std::vector<Tensor> tensors;
  json m = load_container(path, tensors);
  if (m.at("type") != "decoder") throw IoError("not a decoder checkpoint: " + path);
  Decoder dec(m.at("encoder_widths").get<std::vector<int>>(), m.at("n_classes").get<int>(),
              kinds_from_names(m.at("kinds").get<std::vector<std::string>>()), Rng(0));
  fill_state(dec.state_tensors(), tensors);
  if (m.contains("frozen_stats")) {
    const auto fs = m.at("frozen_stats").get<std::vector<int>>();
    for (std::size_t b = 0; b < fs.size() && b < dec.blocks().size(); ++b)
      set_block_frozen_stats(dec.blocks()[b], fs[b] != 0);
  }
  return dec;
}

void save_aux(const std::string& path, AuxHeads& aux, const std::vector<int>& encoder_widths) {
  json m;
  m["type"] = "aux";
  m["encoder_widths"] = encoder_widths;
  m["n_bodyparts"] = aux.body_part.out_channels();
  save_container(path, m, aux.state_tensors());
}

AuxHeads load_aux(const std::string& path) {
  std::vector<Tensor> tensors;
  json m = load_container(path, tensors);
  if (m.at("type") != "aux") throw IoError("not an aux checkpoint: " + path);
  const auto widths = m.at("encoder_widths").get<std::vector<int>>();
  AuxHeads aux;
  aux.body_part = ProjectionHead(widths, m.at("n_bodyparts").get<int>(), Rng(0));
  aux.anomaly = ProjectionHead(widths, 2, Rng(0));
  fill_state(aux.state_tensors(), tensors);
  return aux;
}

}  // namespace cseg
