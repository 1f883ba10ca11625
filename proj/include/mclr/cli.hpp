#pragma once

// Command-line front end. Option values resolve as: explicit flag, then the
// --config JSON file, then MCLR_<NAME> environment variables, then defaults.

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mclr/evaluation.hpp"
#include "mclr/service.hpp"

namespace mclr {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

inline std::string env_name(const std::string& option) {
  std::string out = "MCLR_";
  for (char c : option) out.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return out;
}

namespace detail {

inline std::string config_text(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

inline std::string option_key(const CLI::Option* opt) {
  std::string name = opt->get_single_name();
  std::replace(name.begin(), name.end(), '-', '_');
  return name;
}

// Fills every option left unset on the command line from `file` or the
// environment.
inline void apply_fallbacks(CLI::App& cmd, const nlohmann::json& file) {
  for (CLI::Option* opt : cmd.get_options()) {
    const std::string name = opt->get_single_name();
    if (opt->count() > 0 || name == "help" || name == "config") continue;
    std::optional<std::string> value;
    const std::string key = option_key(opt);
    if (file.contains(key)) {
      value = config_text(file.at(key));
    } else if (file.contains(name)) {
      value = config_text(file.at(name));
    } else if (const char* env = std::getenv(env_name(name).c_str())) {
      value = env;
    }
    if (!value) continue;
    opt->clear();
    opt->add_result(*value);
    opt->run_callback();
  }
}

inline nlohmann::json effective_config(const CLI::App& cmd) {
  nlohmann::json out = nlohmann::json::object();
  for (const CLI::Option* opt : cmd.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      out[option_key(opt)] = r.size() == 1 ? r.front() : nlohmann::json(r).dump();
    } else {
      out[option_key(opt)] = opt->get_default_str();
    }
  }
  return out;
}

inline std::string read_text_arg(const std::string& arg) {
  if (!arg.empty() && arg.front() == '@') return read_file(arg.substr(1));
  return arg;
}

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw DataError(what + " is not valid JSON");
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, j.dump() + "\n");
}

inline nlohmann::json word_tokens(const PromptTokens& t) {
  nlohmann::json out = nlohmann::json::array({"<bos>"});
  for (const auto& w : t.words) out.push_back(w);
  return out;
}

inline std::vector<std::uint64_t> seed_range(std::uint64_t first, int count) {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < count; ++i) out.push_back(first + static_cast<std::uint64_t>(i));
  return out;
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw RangeError("cannot parse '" + item + "' as a number");
    }
  }
  return out;
}

}  // namespace detail

struct TrainArgs {
  std::string corpus;
  int corpus_size = 500;
  std::uint64_t corpus_seed = 1;
  int steps = 2000;
  std::string out;
  std::uint64_t seed = 0;
  int batch = 64;
  int frames = kDefaultFrames;
  double lr = 2e-4;
  std::string resume;
  int log_every = 100;
};

struct GenArgs {
  std::string ckpt, prompt, dump_attn, out;
  int frames = kDefaultFrames;
  std::uint64_t seed = 0;
  double cfg_weight = 2.5;
};

struct EditArgs {
  std::string ckpt, base_prompt, directive, out_dir;
  int frames = kDefaultFrames;
  std::uint64_t seed = 0;
  double cfg_weight = 2.5;
};

struct CountArgs {
  std::string attn, motion;
  double sigma = 0.8;
  int factor = 4;
  double height_multiplier = 3.0;
  int distance = 1;
};

struct EvalArgs {
  std::string ckpt, suite, out;
  int seeds = 20;
  std::uint64_t first_seed = 0;
  int frames = kDefaultFrames;
  std::string prompt = "a man jumps.";
  int word_index = 2;
  std::string weights = "-1,-0.75,-0.5,-0.25,0,0.25,0.5,0.75,1";
  std::string sigmas = "0,0.4,0.8,1.2,1.6,2,2.4";
  int layer = 1;
  int step = 10;
};

struct ServeArgs {
  std::string ckpt, static_dir, host = "127.0.0.1";
  int port = 8080;
};

inline int cmd_train(const TrainArgs& a, std::ostream& log) {
  std::vector<Sample> corpus = a.corpus.empty() ? make_corpus(a.corpus_size, a.corpus_seed, a.frames) : load_corpus(a.corpus);
  DiffusionConfig diffusion;
  TrainConfig train;
  train.steps = a.steps;
  train.batch = a.batch;
  train.lr = a.lr;
  train.seed = a.seed;
  train.validate();
  std::optional<Checkpoint> resumed;
  if (!a.resume.empty()) {
    resumed = load_checkpoint(a.resume);
    diffusion = resumed->diffusion;
  }
  Denoiser<float> model = resumed ? instantiate(*resumed) : Denoiser<float>(default_model_config(), a.seed);
  NormStats stats;
  if (resumed) {
    stats = resumed->stats;
    for (auto& s : corpus) s.motion.features = normalize(s.motion.features, stats);
  } else {
    stats = normalize(corpus);
  }
  Trainer<float> trainer(model, diffusion, train);
  if (resumed) {
    restore_optimizer(*resumed, trainer.optimizer());
    trainer.set_step(resumed->step);
  }
  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  std::ofstream loss_log(out / "loss.csv", resumed ? std::ios::app : std::ios::trunc);
  if (!resumed) loss_log << "step,loss,lr\n";
  double window = 0.0;
  int in_window = 0;
  trainer.run(corpus, a.steps, [&](const TrainProgress& p) {
    loss_log << p.step << ',' << p.loss << ',' << p.lr << '\n';
    window += p.loss;
    ++in_window;
    if (a.log_every > 0 && p.step % a.log_every == 0) {
      log << nlohmann::json{{"step", p.step}, {"loss", window / in_window}, {"lr", p.lr}}.dump() << '\n';
      window = 0.0;
      in_window = 0;
    }
  });
  loss_log.close();
  save_checkpoint(out, model, stats, diffusion, train, trainer.step(), &trainer.optimizer());
  log << "saved checkpoint at step " << trainer.step() << " to " << out.string() << '\n';
  return kExitOk;
}

inline nlohmann::json generation_json(const GenerationResult& r, int frames, double cfg_weight) {
  return {{"prompt", r.prompt}, {"seed", r.seed},       {"frames", frames},
          {"cfg_weight", cfg_weight}, {"word_tokens", detail::word_tokens(r.tokens)},
          {"directives", r.directives}, {"motion", export_motion(r.motion)}};
}

inline int cmd_gen(const GenArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Denoiser<float> model = instantiate(ck);
  DiffusionConfig cfg = ck.diffusion;
  cfg.cfg_weight = a.cfg_weight;
  SampleOptions opt;
  opt.frames = a.frames;
  opt.seed = a.seed;
  opt.record_attention = !a.dump_attn.empty();
  opt.record_unconditional = opt.record_attention;
  const auto results = ddim_sample(model, ck.stats, {{a.prompt, tokenize(a.prompt, ck.vocab)}}, cfg, opt);
  const auto j = generation_json(results[0], a.frames, a.cfg_weight);
  if (a.out.empty()) {
    out << j.dump() << '\n';
  } else {
    detail::write_json(a.out, j);
  }
  if (!a.dump_attn.empty()) {
    std::filesystem::create_directories(a.dump_attn);
    dump_attention(a.dump_attn, results[0].records);
  }
  return kExitOk;
}

inline int cmd_edit(const EditArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Denoiser<float> model = instantiate(ck);
  DiffusionConfig cfg = ck.diffusion;
  cfg.cfg_weight = a.cfg_weight;
  const auto dj = detail::parse_json(detail::read_text_arg(a.directive), "directive");
  const EditDirective d = directive_from_json(dj);
  const EditSession s = run_edit(model, ck.stats, EditBase{a.base_prompt, a.seed, a.frames}, d, cfg);
  const std::filesystem::path dir(a.out_dir);
  std::filesystem::create_directories(dir);
  detail::write_json(dir / "reference.json", generation_json(s.reference, a.frames, a.cfg_weight));
  detail::write_json(dir / "edited.json", generation_json(s.edited, a.frames, a.cfg_weight));
  for (std::size_t i = 1; i < s.generated.size(); ++i) {
    detail::write_json(dir / ("generated_" + std::to_string(i) + ".json"), generation_json(s.generated[i], a.frames, a.cfg_weight));
  }
  auto diff = diff_report(s);
  diff["directive"] = to_json(d);
  detail::write_json(dir / "diff.json", diff);
  return kExitOk;
}

// Head-averages a heads x rows x cols dump; passes a rank-2 map through.
inline MatD attention_from_tensor(const Tensor& t) {
  if (t.dims.size() == 2) return to_matrix(t).cast<double>();
  if (t.dims.size() != 3) throw DataError("attention file must have rank 2 or 3");
  const Eigen::Index heads = t.dims[0], rows = t.dims[1], cols = t.dims[2];
  if (heads == 0) throw DataError("attention file has no heads");
  MatD sum = MatD::Zero(rows, cols);
  for (Eigen::Index h = 0; h < heads; ++h) {
    sum += Eigen::Map<const MatF>(t.data.data() + h * rows * cols, rows, cols).cast<double>();
  }
  return sum / static_cast<double>(heads);
}

inline int cmd_count(const CountArgs& a, std::ostream& out) {
  if (a.attn.empty() == a.motion.empty()) throw RangeError("count needs exactly one of --attn or --motion");
  CountingConfig cfg;
  cfg.sigma = a.sigma;
  cfg.downsample_factor = a.factor;
  cfg.height_multiplier = a.height_multiplier;
  cfg.distance = a.distance;
  cfg.validate();
  if (!a.attn.empty()) {
    out << count_actions_detailed(attention_from_tensor(read_tensor(a.attn)), cfg).to_json(cfg).dump() << '\n';
    return kExitOk;
  }
  nlohmann::json j = detail::parse_json(read_file(a.motion), "motion file");
  if (j.contains("motion")) j = j.at("motion");
  const auto m = import_motion(j);
  const double count = count_from_trajectory(root_height(m.motion.features), cfg.sigma, cfg.height_multiplier);
  out << nlohmann::json{{"count", count},
                        {"source", "trajectory"},
                        {"config", {{"sigma", cfg.sigma}, {"height_multiplier", cfg.height_multiplier}, {"distance", 1}}}}
             .dump()
      << '\n';
  return kExitOk;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Denoiser<float> model = instantiate(ck);
  if (a.seeds < 1) throw RangeError("--seeds must be >= 1");
  const auto seeds = detail::seed_range(a.first_seed, a.seeds);
  std::ostringstream csv;
  if (a.suite == "emphasis-sweep") {
    const auto tokens = tokenize(a.prompt, ck.vocab);
    if (a.word_index < 0 || a.word_index >= static_cast<int>(tokens.words.size())) throw RangeError("--word-index out of range");
    write_csv(csv, emphasis_sweep(model, ck.stats, ck.diffusion, a.prompt, a.word_index, detail::parse_list(a.weights), seeds, a.frames));
  } else if (a.suite == "counting") {
    if (a.layer < 1 || a.layer > model.attention_layers() || a.layer % 2 == 0) throw RangeError("--layer must be a self-attention layer");
    if (a.step < 1 || a.step > ck.diffusion.sample_steps) throw RangeError("--step out of range");
    const auto cases = counting_cases(model, ck.stats, ck.diffusion, default_counting_probes(), seeds, a.layer, a.step, a.frames);
    write_csv(csv, eval_counting(cases, detail::parse_list(a.sigmas)));
  } else {
    throw RangeError("unknown suite '" + a.suite + "'");
  }
  if (a.out.empty()) {
    out << csv.str();
  } else {
    write_file_atomic(a.out, csv.str());
  }
  return kExitOk;
}

inline int cmd_serve(const ServeArgs& a, std::ostream& log) {
  Service service = Service::from_checkpoint(load_checkpoint(a.ckpt));
  httplib::Server server;
  service.mount(server, a.static_dir);
  log << "listening on http://" << a.host << ':' << a.port << '\n';
  log.flush();
  if (!server.listen(a.host, a.port)) throw DataError("cannot bind " + a.host + ":" + std::to_string(a.port));
  return kExitOk;
}

// Parses and runs one subcommand. Diagnostics and the effective-config line
// go to `err`; command output goes to `out`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"mclr: text-conditioned motion diffusion with attention editing"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  std::string config_path;
  auto with_config = [&](CLI::App* c) {
    c->option_defaults()->always_capture_default();
    c->add_option("--config", config_path, "JSON file of option defaults");
  };

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model and write a checkpoint directory");
  with_config(t);
  t->add_option("--corpus", train.corpus, "JSONL corpus (default: synthesize one)");
  t->add_option("--corpus-size", train.corpus_size, "synthetic corpus size");
  t->add_option("--corpus-seed", train.corpus_seed, "synthetic corpus seed");
  t->add_option("--steps", train.steps, "optimizer steps");
  t->add_option("--out", train.out, "checkpoint directory");
  t->add_option("--seed", train.seed, "initialization and batching seed");
  t->add_option("--batch", train.batch, "batch size");
  t->add_option("--frames", train.frames, "frames per synthetic sample");
  t->add_option("--lr", train.lr, "learning rate");
  t->add_option("--resume", train.resume, "checkpoint to continue from");
  t->add_option("--log-every", train.log_every, "loss report interval");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate one motion");
  with_config(g);
  g->add_option("--ckpt", gen.ckpt, "checkpoint directory");
  g->add_option("--prompt", gen.prompt, "text prompt");
  g->add_option("--frames", gen.frames, "frames to generate");
  g->add_option("--seed", gen.seed, "noise seed");
  g->add_option("--cfg-weight", gen.cfg_weight, "classifier-free guidance weight");
  g->add_option("--dump-attn", gen.dump_attn, "directory for attention TensorFiles");
  g->add_option("--out", gen.out, "motion JSON path (default: stdout)");

  EditArgs edit;
  auto* e = app.add_subcommand("edit", "sample a reference and an edited motion");
  with_config(e);
  e->add_option("--ckpt", edit.ckpt, "checkpoint directory");
  e->add_option("--base-prompt", edit.base_prompt, "prompt of the reference motion");
  e->add_option("--seed", edit.seed, "noise seed");
  e->add_option("--frames", edit.frames, "frames to generate");
  e->add_option("--cfg-weight", edit.cfg_weight, "classifier-free guidance weight");
  e->add_option("--directive", edit.directive, "directive JSON, or @file");
  e->add_option("--out-dir", edit.out_dir, "output directory");

  CountArgs count;
  auto* c = app.add_subcommand("count", "count actions from an attention map or a motion");
  with_config(c);
  c->add_option("--attn", count.attn, "self-attention TensorFile (rank 2, or heads x F x F)");
  c->add_option("--motion", count.motion, "motion JSON");
  c->add_option("--sigma", count.sigma, "Gaussian smoothing sigma");
  c->add_option("--factor", count.factor, "downsampling factor");
  c->add_option("--height-multiplier", count.height_multiplier, "peak height as a multiple of the mean");
  c->add_option("--distance", count.distance, "minimum peak distance");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "run an evaluation suite and write CSV");
  with_config(v);
  v->add_option("--ckpt", ev.ckpt, "checkpoint directory");
  v->add_option("--suite", ev.suite, "counting | emphasis-sweep");
  v->add_option("--out", ev.out, "CSV path (default: stdout)");
  v->add_option("--seeds", ev.seeds, "number of seeds");
  v->add_option("--first-seed", ev.first_seed, "first seed");
  v->add_option("--frames", ev.frames, "frames to generate");
  v->add_option("--prompt", ev.prompt, "emphasis-sweep prompt");
  v->add_option("--word-index", ev.word_index, "emphasis-sweep target word");
  v->add_option("--weights", ev.weights, "emphasis-sweep weights, comma separated");
  v->add_option("--sigmas", ev.sigmas, "counting sigmas, comma separated");
  v->add_option("--layer", ev.layer, "counting self-attention layer");
  v->add_option("--step", ev.step, "counting sampling step");

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "run the HTTP API");
  with_config(s);
  s->add_option("--ckpt", serve.ckpt, "checkpoint directory");
  s->add_option("--port", serve.port, "TCP port");
  s->add_option("--host", serve.host, "bind address");
  s->add_option("--static-dir", serve.static_dir, "directory served at /");

  const std::map<CLI::App*, std::vector<std::string>> required = {
      {t, {"out"}}, {g, {"ckpt", "prompt"}}, {e, {"ckpt", "base_prompt", "directive", "out_dir"}},
      {c, {}},      {v, {"ckpt", "suite"}},  {s, {"ckpt"}}};

  try {
    app.parse(argc, argv);
    CLI::App* cmd = app.get_subcommands().front();
    nlohmann::json file = nlohmann::json::object();
    if (!config_path.empty()) {
      file = detail::parse_json(read_file(config_path), "config file");
      if (!file.is_object()) throw DataError("config file must hold a JSON object");
    }
    detail::apply_fallbacks(*cmd, file);
    const auto effective = detail::effective_config(*cmd);
    for (const auto& key : required.at(cmd)) {
      if (effective.at(key).get<std::string>().empty()) throw CLI::RequiredError("--" + std::string(key));
    }
    err << "mclr " << cmd->get_name() << " effective-config " << effective.dump() << '\n';
    if (cmd == t) return cmd_train(train, err);
    if (cmd == g) return cmd_gen(gen, out);
    if (cmd == e) return cmd_edit(edit);
    if (cmd == c) return cmd_count(count, out);
    if (cmd == v) return cmd_eval(ev, out);
    return cmd_serve(serve, err);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const RangeError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const DataError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  } catch (const NumericError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  } catch (const nlohmann::json::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  }
}

}  // namespace mclr
