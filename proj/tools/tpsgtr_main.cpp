// Command-line front end: toy-world generation, training, captioning,
// evaluation, binding inspection, and gradient checking.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tpsgtr/config.hpp"
#include "tpsgtr/decoder.hpp"
#include "tpsgtr/metrics.hpp"
#include "tpsgtr/scenegraph.hpp"
#include "tpsgtr/training.hpp"

namespace {

using nlohmann::json;
using namespace tpsgtr;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitMismatch = 5;

std::size_t env_threads() {
  const char* v = std::getenv("TPSGTR_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) return 1;
  return static_cast<std::size_t>(n);
}

RunConfig load_config_opt(const std::string& path) {
  return path.empty() ? RunConfig{} : load_config(path);
}

ToyWorldConfig toy_config(const RunConfig& cfg, std::uint64_t seed) {
  ToyWorldConfig tw;
  tw.object_vocab = cfg.objects;
  tw.predicate_vocab = cfg.predicates;
  tw.feature_dim = cfg.feature_dim;
  tw.tag_dim = cfg.tag_dim;
  tw.triplets_min = cfg.triplets_min;
  tw.triplets_max = cfg.triplets_max;
  tw.noise_scale = cfg.noise;
  tw.corruption_rate = cfg.corruption;
  tw.seed = seed;
  return tw;
}

TrainConfig train_config(const RunConfig& cfg, Arch arch, Pool pool) {
  TrainConfig tc;
  tc.lr = cfg.lr;
  tc.beta1 = cfg.beta1;
  tc.beta2 = cfg.beta2;
  tc.adam_eps = cfg.adam_eps;
  tc.epochs = cfg.epochs;
  tc.clip_norm = cfg.clip_norm;
  tc.seed = cfg.seed;
  tc.target_loss = cfg.target_loss;
  tc.arch = arch;
  tc.pool = pool;
  tc.role_order = cfg.role_order;
  tc.d_emb = cfg.d_emb;
  tc.d_h = cfg.d_h;
  tc.d_att = cfg.d_att;
  return tc;
}

// --- gen-data ---------------------------------------------------------------

int cmd_gen_data(std::size_t scenes, std::uint64_t seed, bool seed_given, const std::string& config_path,
                 const std::string& out_path, std::size_t start_index) {
  RunConfig cfg = load_config_opt(config_path);
  if (scenes < 1) throw ConfigError("--scenes must be at least 1");
  ToyWorldConfig tw = toy_config(cfg, seed_given ? seed : cfg.seed);
  const auto records = generate_toy_world(tw, scenes, start_index);
  write_dataset(out_path, records);

  const Vocab vocab = Vocab::build(records);
  std::printf("records\t%zu\n", records.size());
  std::printf("vocab_size\t%zu\n", vocab.size());
  std::string words;
  for (const auto& w : vocab.words) {
    if (!words.empty()) words += ' ';
    words += w;
  }
  std::printf("vocab\t%s\n", words.c_str());
  return kExitOk;
}

// --- train -------------------------------------------------------------------

int cmd_train(const std::string& data_path, const std::string& arch_name, const std::string& config_path,
              const std::string& out_path) {
  RunConfig cfg = load_config_opt(config_path);
  const auto [arch, pool] = parse_arch(arch_name);
  const auto records = read_dataset(data_path);
  TrainConfig tc = train_config(cfg, arch, pool);
  TrainResult result = train(records, tc, [](std::size_t epoch, double loss) {
    std::printf("%zu\t%.6f\n", epoch, loss);
    std::fflush(stdout);
  });
  save_checkpoint(result.checkpoint, out_path);
  return kExitOk;
}

// --- caption -----------------------------------------------------------------

int cmd_caption(const std::string& ckpt_path, const std::string& data_path, std::size_t beam, std::size_t max_len) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelParams params = ckpt.to_model();
  const Vocab vocab = Vocab::from_words(ckpt.vocab);
  const auto records = read_dataset(data_path);
  DecodeConfig dc{beam, max_len};
  for (const auto& rec : records) {
    const TokenSeq tokens = detail::decode_record(params, vocab, rec, dc);
    std::string line;
    for (const auto& t : tokens) {
      if (!line.empty()) line += ' ';
      line += t;
    }
    std::printf("%s\t%s\n", rec.id.c_str(), line.c_str());
  }
  return kExitOk;
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& out_path,
             std::size_t beam, std::size_t max_len) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelParams params = ckpt.to_model();
  const Vocab vocab = Vocab::from_words(ckpt.vocab);
  const auto records = read_dataset(data_path);
  const MetricReport report = evaluate(params, vocab, records, DecodeConfig{beam, max_len}, env_threads());

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + out_path + "' for writing");
  out << report_to_json(report).dump(2) << "\n";
  if (!out) throw IoError("failed writing report to '" + out_path + "'");

  std::printf("bleu_1\t%.6f\n", report.bleu_1);
  std::printf("bleu_2\t%.6f\n", report.bleu_2);
  std::printf("bleu_3\t%.6f\n", report.bleu_3);
  std::printf("bleu_4\t%.6f\n", report.bleu_4);
  std::printf("rouge_l\t%.6f\n", report.rouge_l);
  return kExitOk;
}

// --- inspect -----------------------------------------------------------------

Tensor vector_from_json(const json& j, const std::string& key) {
  if (!j.contains(key) || !j.at(key).is_array()) {
    throw ConfigError("inspect input needs a numeric array '" + key + "'");
  }
  try {
    return Tensor::vector(j.at(key).get<std::vector<double>>());
  } catch (const json::exception&) {
    throw ConfigError("inspect input field '" + key + "' is not a numeric array");
  }
}

json matrix_to_json(const Tensor& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m.at(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

int cmd_inspect(bool do_bind, const std::string& input_path) {
  std::ifstream in(input_path, std::ios::binary);
  if (!in) throw IoError("cannot open inspect input '" + input_path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("inspect input '" + input_path + "' is not valid JSON");

  const std::size_t order = j.contains("order") ? j.at("order").get<std::size_t>() : 4;
  const RoleBasis basis = hadamard_roles(order);

  if (do_bind) {
    Triplet t;
    t.subject = vector_from_json(j, "s");
    t.predicate = vector_from_json(j, "p");
    t.object = vector_from_json(j, "o");
    const TpsgtrEncoding enc = bind_triplet(t, basis);
    double err = 0.0;
    err = std::max(err, max_abs_diff(unbind(enc, Slot::subject, basis), t.subject));
    err = std::max(err, max_abs_diff(unbind(enc, Slot::predicate, basis), t.predicate));
    err = std::max(err, max_abs_diff(unbind(enc, Slot::object, basis), t.object));
    json out;
    out["order"] = order;
    out["matrix"] = matrix_to_json(enc.matrix);
    out["roundtrip_max_error"] = err;
    std::printf("%s\n", out.dump(2).c_str());
    return kExitOk;
  }

  if (!j.contains("matrix") || !j.at("matrix").is_array() || j.at("matrix").empty()) {
    throw ConfigError("inspect --unbind input needs a 'matrix' array of rows");
  }
  std::vector<double> data;
  std::size_t cols = 0;
  for (const auto& row : j.at("matrix")) {
    std::vector<double> r;
    try {
      r = row.get<std::vector<double>>();
    } catch (const json::exception&) {
      throw ConfigError("inspect matrix rows must be numeric arrays");
    }
    if (cols == 0) cols = r.size();
    if (r.size() != cols || cols == 0) throw ConfigError("inspect matrix rows must have equal, non-zero length");
    data.insert(data.end(), r.begin(), r.end());
  }
  if (cols != order) {
    throw ConfigError("matrix has " + std::to_string(cols) + " columns but the role order is " +
                      std::to_string(order));
  }
  TpsgtrEncoding enc;
  const std::size_t rows = data.size() / cols;
  enc.matrix = Tensor::matrix(rows, cols, std::move(data));
  enc.basis_order = order;
  json out;
  out["order"] = order;
  out["subject"] = matvec(enc.matrix, basis.column(enc.slot_columns[0])).data();
  out["predicate"] = matvec(enc.matrix, basis.column(enc.slot_columns[1])).data();
  out["object"] = matvec(enc.matrix, basis.column(enc.slot_columns[2])).data();
  const Tensor reserved = matvec(enc.matrix, basis.column(0));
  out["reserved"] = reserved.data();
  out["reserved_norm"] = norm(reserved);
  std::printf("%s\n", out.dump(2).c_str());
  return kExitOk;
}

// --- gradcheck ----------------------------------------------------------------

int cmd_gradcheck(const std::string& arch_name, std::uint64_t seed, bool corrupt) {
  const auto [arch, pool] = parse_arch(arch_name);

  Dims dims;
  dims.d = 8;
  dims.role_order = 4;
  dims.d_v = 8;
  dims.d_e = 6;
  dims.d_emb = 8;
  dims.d_h = 16;
  dims.d_att = 12;
  dims.vocab = 20;
  const std::size_t n_triplets = 3;
  const std::size_t n_steps = 3;

  Rng rng(mix_seed(seed, 0xC4EC));
  SceneRecord rec;
  rec.id = "gradcheck";
  for (std::size_t k = 0; k < n_triplets; ++k) {
    Triplet t;
    auto draw = [&] {
      Tensor v({dims.d});
      for (std::size_t i = 0; i < dims.d; ++i) v[i] = rng.gaussian();
      return v;
    };
    t.subject = draw();
    t.predicate = draw();
    t.object = draw();
    rec.triplets.push_back(std::move(t));
  }
  Tensor tags({dims.d_e});
  for (std::size_t i = 0; i < dims.d_e; ++i) tags[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  rec.tags = tags;
  Tensor globalv({dims.d_v});
  for (std::size_t i = 0; i < dims.d_v; ++i) globalv[i] = rng.gaussian();
  rec.global_feature = globalv;
  rec.captions.push_back({"w0"});

  ModelParams model = make_model(arch, pool, dims);
  for (const auto& name : param_names(arch)) {
    Tensor& t = model.tensors.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-0.5, 0.5);
  }

  // The loss is a fixed dense linear functional of the step log-probs. Its
  // small magnitude keeps central-difference rounding noise below the 1e-4
  // relative tolerance; gradients still flow through every parameter group.
  std::vector<Tensor> probes;
  for (std::size_t k = 0; k < n_steps; ++k) {
    Tensor r({dims.vocab});
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = 0.002 * rng.gaussian();
    probes.push_back(std::move(r));
  }

  const SceneContext ctx = make_scene_context(model, rec);

  ScalarFn f = [&, arch, pool, dims](Tape& tape, const std::map<std::string, Tensor>& tensors) -> Var {
    TapeParams tp{arch, pool, dims, {}};
    for (const auto& [name, value] : tensors) tp.w.emplace(name, tape.param(name, value));
    TapeScene sc = bind_scene(tape, ctx);
    TapeState st = initial_tape_state(tape, dims, 0);
    Var loss{};
    for (std::size_t k = 0; k < n_steps; ++k) {
      detail::TapeStepOut out = detail::decoder_step(tape, tp, sc, st);
      Var term = tape.dot(tape.input(probes[k]), out.log_probs);
      loss = k == 0 ? term : tape.add(loss, term);
      st.prev_token = static_cast<int>((k + 1) % dims.vocab);
    }
    if (corrupt) {
      // negative control: forward-only contribution the tape cannot see
      const double leak = 0.05 * tensors.at("out.w_hx")[0];
      loss = tape.add(loss, tape.input(Tensor::scalar(leak)));
    }
    return loss;
  };

  const FdReport report = finite_difference_report(f, model.tensors, 5e-5);
  bool ok = true;
  for (const auto& [name, err] : report.per_param) {
    std::printf("%s\t%.3e\n", name.c_str(), err);
    ok = ok && err < 1e-4;
  }
  std::printf("max\t%.3e\n", report.max_rel_error);
  std::printf("%s\n", ok ? "gradcheck OK" : "gradcheck FAILED");
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tensor-product scene-graph triplet captioning toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene/caption dataset (JSONL)");
  std::size_t scenes = 0;
  std::uint64_t seed = 1;
  std::string config_path, out_path, data_path, ckpt_path, arch_name = "tdbu", input_path;
  std::size_t start_index = 0, beam = 1, max_len = 30;
  gen->add_option("--scenes", scenes, "number of scenes")->required();
  auto* seed_opt = gen->add_option("--seed", seed, "world seed");
  gen->add_option("--config", config_path, "key=value config file");
  gen->add_option("--out", out_path, "output dataset path")->required();
  gen->add_option("--start-index", start_index, "index of the first scene (for held-out splits)");

  // train
  auto* tr = app.add_subcommand("train", "train a captioning model");
  tr->add_option("--data", data_path, "dataset path")->required();
  tr->add_option("--arch", arch_name, "architecture: tdbu, stdbu, tdbu_meanpool, stdbu_meanpool")->required();
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--out", out_path, "checkpoint output path")->required();

  // caption
  auto* cap = app.add_subcommand("caption", "decode captions for every record");
  cap->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  cap->add_option("--data", data_path, "dataset path")->required();
  cap->add_option("--beam", beam, "beam width (1 = greedy)");
  cap->add_option("--max-len", max_len, "maximum caption length");

  // eval
  auto* ev = app.add_subcommand("eval", "score decoded captions against references");
  ev->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  ev->add_option("--data", data_path, "dataset path")->required();
  ev->add_option("--out", out_path, "metric report output path (JSON)")->required();
  ev->add_option("--beam", beam, "beam width (1 = greedy)");
  ev->add_option("--max-len", max_len, "maximum caption length");

  // inspect
  auto* ins = app.add_subcommand("inspect", "bind or unbind a triplet encoding");
  bool do_bind = false, do_unbind = false;
  ins->add_flag("--bind", do_bind, "bind a triplet from JSON {s, p, o}");
  ins->add_flag("--unbind", do_unbind, "recover slot fillers from JSON {matrix}");
  ins->add_option("--input", input_path, "input JSON path")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "compare tape gradients against central differences");
  gc->add_option("--arch", arch_name, "architecture: tdbu, stdbu, tdbu_meanpool, stdbu_meanpool")->required();
  gc->add_option("--seed", seed, "seed for parameters and inputs");
  bool corrupt = false;
  gc->add_flag("--corrupt", corrupt, "negative-control hook: inject an untracked loss term")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(scenes, seed, seed_opt->count() > 0, config_path, out_path, start_index);
    if (tr->parsed()) return cmd_train(data_path, arch_name, config_path, out_path);
    if (cap->parsed()) return cmd_caption(ckpt_path, data_path, beam, max_len);
    if (ev->parsed()) return cmd_eval(ckpt_path, data_path, out_path, beam, max_len);
    if (ins->parsed()) {
      if (do_bind == do_unbind) throw ConfigError("inspect needs exactly one of --bind or --unbind");
      return cmd_inspect(do_bind, input_path);
    }
    if (gc->parsed()) return cmd_gradcheck(arch_name, seed, corrupt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ArgumentError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const VersionError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return kExitDivergence;
  } catch (const MismatchError& e) {
    std::fprintf(stderr, "shape mismatch: %s\n", e.what());
    return kExitMismatch;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitConfig;
}
