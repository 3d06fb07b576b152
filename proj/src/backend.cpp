#include "cutkit/backend.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

#include "cutkit/error.hpp"

namespace cutkit::nn {

namespace {
constexpr char kMagic[8] = {'C', 'U', 'T', 'C', 'K', 'P', 'T', '1'};
}

LanguageModel make_language_model(ModelConfig cfg, Tokenizer tok, uint64_t seed) {
  cfg.vocab_size = tok.vocab_size();
  return LanguageModel{std::move(tok), TransformerLM(cfg, seed)};
}

Scored encode_pair(const Tokenizer& tok, std::string_view context, std::string_view target,
                   bool append_eos) {
  Scored s;
  s.ids = tok.encode(context);
  s.boundary = s.ids.size();
  std::vector<int> t = tok.encode(target);
  s.ids.insert(s.ids.end(), t.begin(), t.end());
  if (append_eos) s.ids.push_back(tok.eos_id());
  return s;
}

std::vector<double> token_logprobs(const LanguageModel& lm, std::string_view context,
                                   std::string_view target, bool append_eos) {
  Scored s = encode_pair(lm.tok, context, target, append_eos);
  return lm.net.token_logprobs(s.ids, s.boundary);
}

std::string generate(const LanguageModel& lm, std::string_view context,
                     const GenerationConfig& gen, std::mt19937_64* rng) {
  std::vector<int> prompt = lm.tok.encode(context);
  std::vector<int> out = lm.net.generate_ids(prompt, gen, rng);
  return lm.tok.decode(out);
}

void save_checkpoint(const std::filesystem::path& path, const LanguageModel& lm,
                     bool include_optimizer) {
  const ModelConfig& c = lm.net.config();
  nlohmann::json header;
  header["config"] = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                      {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                      {"d_ff", c.d_ff},             {"max_seq", c.max_seq},
                      {"init_std", c.init_std}};
  header["alphabet"] = lm.tok.alphabet();
  header["opt"] = {{"present", include_optimizer}, {"step", lm.net.opt_step()}};
  nlohmann::json tensors = nlohmann::json::array();
  for (const TensorSpec& t : lm.net.tensors()) {
    tensors.push_back({{"name", t.name}, {"offset", t.offset}, {"size", t.size}});
  }
  header["tensors"] = std::move(tensors);
  std::string hbytes = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  uint64_t hlen = hbytes.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
  auto write_doubles = [&](const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  };
  write_doubles(lm.net.params());
  if (include_optimizer) {
    write_doubles(lm.net.opt_m());
    write_doubles(lm.net.opt_v());
  }
  out.flush();
  if (!out) throw RuntimeError("failed writing checkpoint: " + path.string());
}

LanguageModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw RuntimeError("not a cutkit checkpoint: " + path.string());
  }
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen == 0 || hlen > (1u << 20)) {
    throw RuntimeError("corrupt checkpoint header length: " + path.string());
  }
  std::string hbytes(hlen, '\0');
  in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw RuntimeError("truncated checkpoint header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hbytes);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeError("corrupt checkpoint header: " + std::string(e.what()));
  }
  ModelConfig cfg;
  try {
    const auto& jc = header.at("config");
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.d_ff = jc.at("d_ff").get<int>();
    cfg.max_seq = jc.at("max_seq").get<int>();
    cfg.init_std = jc.at("init_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeError("checkpoint header missing config fields: " + std::string(e.what()));
  }

  std::vector<uint8_t> alphabet = header.at("alphabet").get<std::vector<uint8_t>>();
  if (static_cast<int>(alphabet.size()) + 2 != cfg.vocab_size) {
    throw RuntimeError("checkpoint alphabet size disagrees with vocab_size");
  }
  std::string chars(alphabet.begin(), alphabet.end());
  Tokenizer tok = Tokenizer::for_alphabet(chars);
  if (tok.alphabet() != alphabet) {
    throw RuntimeError("checkpoint alphabet contains duplicate characters");
  }

  TransformerLM net(cfg);
  const auto& jt = header.at("tensors");
  if (jt.size() != net.tensors().size()) {
    throw RuntimeError("checkpoint tensor table size mismatch");
  }
  for (size_t i = 0; i < net.tensors().size(); ++i) {
    const TensorSpec& spec = net.tensors()[i];
    if (jt[i].at("name").get<std::string>() != spec.name ||
        jt[i].at("offset").get<size_t>() != spec.offset ||
        jt[i].at("size").get<size_t>() != spec.size) {
      throw RuntimeError("checkpoint tensor table mismatch at entry " + std::to_string(i));
    }
  }

  auto read_doubles = [&](std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw RuntimeError("truncated checkpoint payload: " + path.string());
  };
  read_doubles(net.params());
  bool opt_present = header.at("opt").at("present").get<bool>();
  if (opt_present) {
    read_doubles(net.opt_m());
    read_doubles(net.opt_v());
    net.set_opt_step(header.at("opt").at("step").get<int64_t>());
  }
  in.peek();
  if (!in.eof()) throw RuntimeError("trailing bytes after checkpoint payload: " + path.string());
  return LanguageModel{std::move(tok), std::move(net)};
}

}  // namespace cutkit::nn
