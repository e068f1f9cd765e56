/*
 * Copyright 2026 The npdraw Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// npdraw: command-line entry point for the whole pipeline.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "npdraw/checkpoint.hpp"
#include "npdraw/dataset.hpp"
#include "npdraw/glyphs.hpp"
#include "npdraw/metadata.hpp"
#include "npdraw/pipeline.hpp"
#include "npdraw/service.hpp"

namespace fs = std::filesystem;
using namespace npdraw;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options every subcommand shares.
struct Common {
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON file of option values; command-line flags take precedence");
  c.seed_opt = sub->add_option("--seed", c.seed, "Random seed (falls back to $NPDRAW_SEED, then 0)");
}

std::string option_key(const CLI::Option* opt) {
  std::string name = opt->get_name(false, true);
  while (!name.empty() && name.front() == '-') name.erase(name.begin());
  return name;
}

// Fills options not given on the command line from the JSON config, then the seed from the environment.
void apply_config(CLI::App* sub, Common& c) {
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw UsageError("cannot open config file " + c.config);
    json j;
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw UsageError("config " + c.config + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UsageError("config " + c.config + " must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      CLI::Option* opt = sub->get_option_no_throw("--" + flag);
      if (!opt || flag == "config") throw UsageError("unknown config key '" + key + "' for '" + sub->get_name() + "'");
      if (opt->count() > 0) continue;
      auto as_text = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
      if (value.is_array()) {
        for (const auto& v : value) opt->add_result(as_text(v));
      } else {
        opt->add_result(as_text(value));
      }
      opt->run_callback();
    }
  }
  if (c.seed_opt && c.seed_opt->count() == 0) {
    if (const char* env = std::getenv("NPDRAW_SEED")) {
      try {
        c.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw UsageError(std::string("NPDRAW_SEED is not an integer: ") + env);
      }
    }
  }
}

// Every option's effective value, for run metadata.
json effective_config(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string key = option_key(opt);
    if (key.empty() || key == "help") continue;
    const auto results = opt->results();
    if (!results.empty()) {
      j[key] = results.size() == 1 ? json(results[0]) : json(results);
    } else if (!opt->get_default_str().empty()) {
      j[key] = opt->get_default_str();
    }
  }
  return j;
}

void write_meta(const fs::path& out, const std::string& command, const CLI::App* sub, const Common& c,
                const std::vector<fs::path>& inputs) {
  RunMetadata meta;
  meta.command = command;
  meta.seed = c.seed;
  meta.config = effective_config(sub);
  meta.inputs = inputs;
  const fs::path path = fs::is_directory(out) ? out / "run.json" : fs::path(out.string() + ".run.json");
  write_run_metadata(path, meta);
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<Image> load_images(const std::string& path, std::size_t limit) {
  Dataset ds = load_dataset(path);
  if (limit > 0 && ds.images.size() > limit) ds.images.resize(limit);
  if (ds.images.empty()) throw std::runtime_error("dataset " + path + " holds no images");
  return ds.images;
}

GridGeometry geometry_for(const std::vector<Image>& images, std::size_t patch_size) {
  return make_geometry(images.at(0).height, images.at(0).width, patch_size);
}

std::shared_ptr<FullModel<float>> load_full(const std::string& path) {
  auto bundle = full_from_checkpoint(load_checkpoint(path));
  return std::make_shared<FullModel<float>>(std::move(bundle.model));
}

std::string numbered(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu%s", i, ext);
  return buf;
}

std::set<std::size_t> parse_cells(const std::vector<std::size_t>& cells, const GridGeometry& g) {
  std::set<std::size_t> out;
  for (auto c : cells) {
    if (c < 1 || c > g.T) throw UsageError("cell " + std::to_string(c) + " outside [1, " + std::to_string(g.T) + "]");
    out.insert(c);
  }
  return out;
}

struct PriorArch {
  PriorConfig cfg;
  void add(CLI::App* sub) {
    sub->add_option("--prior-layers", cfg.layers, "Transformer layers")->capture_default_str();
    sub->add_option("--prior-hidden", cfg.hidden, "Transformer width")->capture_default_str();
    sub->add_option("--prior-heads", cfg.heads, "Attention heads")->capture_default_str();
    sub->add_option("--prior-ff", cfg.ff, "Transformer MLP width")->capture_default_str();
    sub->add_option("--prior-dropout", cfg.dropout, "Dropout rate")->capture_default_str();
    sub->add_option("--prior-cnn-hidden", cfg.cnn_hidden, "Frame CNN channels")->capture_default_str();
    sub->add_option("--prior-head-hidden", cfg.head_hidden, "Output head width")->capture_default_str();
  }
  PriorConfig for_problem(const GridGeometry& g, std::size_t m, std::size_t c) const {
    PriorConfig p = PriorConfig::for_geometry(g, m, c);
    p.layers = cfg.layers;
    p.hidden = cfg.hidden;
    p.heads = cfg.heads;
    p.ff = cfg.ff;
    p.dropout = cfg.dropout;
    p.cnn_hidden = cfg.cnn_hidden;
    p.head_hidden = cfg.head_hidden;
    p.validate();
    return p;
  }
};

struct VaeArch {
  VaeConfig cfg;
  std::string output = "bernoulli";
  bool soft = false;
  void add(CLI::App* sub) {
    sub->add_option("--lambda", cfg.lambda_reg, "Weight of the parse regularizer")->capture_default_str();
    sub->add_option("--hidden", cfg.hidden, "Encoder and decoder channels")->capture_default_str();
    sub->add_option("--head-hidden", cfg.head_hidden, "Posterior head width")->capture_default_str();
    sub->add_option("--output", output, "bernoulli | logistic_mixture")->capture_default_str();
    sub->add_option("--mixtures", cfg.mixtures, "Logistic mixture components")->capture_default_str();
    sub->add_option("--temperature", cfg.temperature, "Gumbel-softmax temperature")->capture_default_str();
    sub->add_flag("--soft", soft, "Relaxed samples instead of straight-through");
  }
  VaeConfig resolved() const {
    VaeConfig c = cfg;
    c.output = output_dist_from_string(output);
    c.hard = !soft;
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"npdraw: part-based canvas generative models"};
  app.require_subcommand(0, 1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // gen-glyphs
  Common c_gen;
  std::size_t gen_train = 1000, gen_test = 200;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-glyphs", "Write the synthetic glyph corpus (train/test IDX and alphabet bank)");
  add_common(gen, c_gen);
  gen->add_option("--train", gen_train, "Training images")->capture_default_str();
  gen->add_option("--test", gen_test, "Test images")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // bank build
  auto* bank_cmd = app.add_subcommand("bank", "Part bank commands");
  bank_cmd->require_subcommand(1);
  Common c_bank;
  BankBuildConfig bank_cfg;
  std::string bank_data, bank_out;
  std::size_t bank_limit = 0;
  auto* bank_build = bank_cmd->add_subcommand("build", "Cluster sampled patches into an M-part bank (NPBK)");
  add_common(bank_build, c_bank);
  bank_build->add_option("--data", bank_data, "Dataset (IDX file or directory)")->required();
  bank_build->add_option("--patch-size", bank_cfg.patch_size, "K")->capture_default_str();
  bank_build->add_option("--bank-size", bank_cfg.bank_size, "M")->capture_default_str();
  bank_build->add_option("--per-image", bank_cfg.per_image, "Patches sampled per image")->capture_default_str();
  bank_build->add_option("--cap", bank_cfg.cap, "Maximum patches clustered")->capture_default_str();
  bank_build->add_option("--max-iters", bank_cfg.max_iters, "k-medoids iterations")->capture_default_str();
  bank_build->add_option("--min-norm", bank_cfg.min_norm, "Drop patches with L2 norm at or below this")->capture_default_str();
  bank_build->add_flag("--grid-aligned", bank_cfg.grid_aligned, "Sample only grid-aligned patches");
  bank_build->add_option("--max-images", bank_limit, "Use at most this many images (0 = all)");
  bank_build->add_option("--out", bank_out, "Output .npbk")->required();

  // parse
  Common c_parse;
  std::string parse_data, parse_image_path, parse_bank, parse_out;
  ParseConfig parse_cfg;
  std::size_t parse_limit = 0;
  auto* parse = app.add_subcommand("parse", "Heuristic parse of every image into a program (NPLT)");
  add_common(parse, c_parse);
  auto* parse_data_opt = parse->add_option("--data", parse_data, "Dataset (writes one NNNNN.nplt per image into --out)");
  parse->add_option("--image", parse_image_path, "Single PGM/PPM (writes the program to --out)")->excludes(parse_data_opt);
  parse->add_option("--bank", parse_bank, "Part bank .npbk")->required();
  parse->add_option("--epsilon", parse_cfg.epsilon, "Draw threshold")->capture_default_str();
  parse->add_option("--max-images", parse_limit, "Use at most this many images (0 = all)");
  parse->add_option("--out", parse_out, "Output directory, or .nplt file with --image")->required();

  // prior pretrain / sample
  auto* prior_cmd = app.add_subcommand("prior", "Autoregressive prior commands");
  prior_cmd->require_subcommand(1);
  Common c_pre;
  PriorArch pre_arch;
  PretrainConfig pre_cfg;
  std::string pre_data, pre_bank, pre_out;
  ParseConfig pre_parse;
  std::size_t pre_limit = 0;
  auto* pretrain = prior_cmd->add_subcommand("pretrain", "Teacher-forced training on parsed programs");
  add_common(pretrain, c_pre);
  pretrain->add_option("--data", pre_data, "Dataset")->required();
  pretrain->add_option("--bank", pre_bank, "Part bank .npbk")->required();
  pretrain->add_option("--epsilon", pre_parse.epsilon, "Parser draw threshold")->capture_default_str();
  pretrain->add_option("--epochs", pre_cfg.epochs, "Epochs")->capture_default_str();
  pretrain->add_option("--batch", pre_cfg.batch, "Batch size")->capture_default_str();
  pretrain->add_option("--lr", pre_cfg.lr, "Adam learning rate")->capture_default_str();
  pretrain->add_option("--val-fraction", pre_cfg.val_fraction, "Validation share")->capture_default_str();
  pretrain->add_option("--max-steps", pre_cfg.max_steps, "Stop after this many updates (0 = none)")->capture_default_str();
  pretrain->add_option("--max-images", pre_limit, "Use at most this many images (0 = all)");
  pretrain->add_option("--out", pre_out, "Output prior checkpoint .npck")->required();
  pre_arch.add(pretrain);

  Common c_ps;
  std::string ps_prior, ps_bank, ps_out;
  double ps_temp = 1.0;
  std::size_t ps_count = 1;
  auto* prior_sample = prior_cmd->add_subcommand("sample", "Ancestral samples: programs and canvases");
  add_common(prior_sample, c_ps);
  prior_sample->add_option("--prior,--ckpt", ps_prior, "Prior checkpoint")->required();
  prior_sample->add_option("--bank", ps_bank, "Part bank .npbk")->required();
  prior_sample->add_option("--temperature", ps_temp, "Sampling temperature (0 = argmax)")->capture_default_str();
  prior_sample->add_option("-n,--count", ps_count, "Number of samples")->capture_default_str();
  prior_sample->add_option("--out,--out-dir", ps_out, "Output directory")->required();

  // train
  Common c_train;
  VaeArch train_arch;
  TrainConfig train_cfg;
  ParseConfig train_parse;
  std::string train_data, train_bank, train_prior, train_out, train_resume;
  std::size_t train_limit = 0;
  auto* train = app.add_subcommand("train", "Train encoder and decoder against the frozen prior");
  add_common(train, c_train);
  train->add_option("--data", train_data, "Training dataset")->required();
  train->add_option("--bank", train_bank, "Part bank .npbk");
  train->add_option("--prior", train_prior, "Pretrained prior checkpoint");
  train->add_option("--resume", train_resume, "Continue from a full-model checkpoint (keeps its settings except --epochs)");
  train->add_option("--epsilon", train_parse.epsilon, "Parser draw threshold")->capture_default_str();
  train->add_option("--epochs", train_cfg.epochs, "Epochs")->capture_default_str();
  train->add_option("--batch", train_cfg.batch, "Batch size")->capture_default_str();
  train->add_option("--lr", train_cfg.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--val-fraction", train_cfg.val_fraction, "Validation share")->capture_default_str();
  train->add_option("--max-images", train_limit, "Use at most this many images (0 = all)");
  train->add_option("--out", train_out, "Output checkpoint .npck (rewritten every epoch)")->required();
  train_arch.add(train);

  // eval
  Common c_eval;
  std::string eval_model, eval_data, eval_out;
  std::size_t eval_k = 50, eval_limit = 0;
  auto* eval = app.add_subcommand("eval", "Importance-weighted NLL on a dataset");
  add_common(eval, c_eval);
  eval->add_option("--model", eval_model, "Full-model checkpoint")->required();
  eval->add_option("--data", eval_data, "Dataset")->required();
  eval->add_option("--iwae-k", eval_k, "Importance samples per image")->capture_default_str();
  eval->add_option("--max-images", eval_limit, "Use at most this many images (0 = all)");
  eval->add_option("--out", eval_out, "Also write the result JSON here");

  // sample-full
  Common c_sf;
  std::string sf_model, sf_out;
  double sf_temp = 1.0;
  std::size_t sf_count = 1;
  auto* sample_full = app.add_subcommand("sample-full", "Prior sample, rendered and decoded");
  add_common(sample_full, c_sf);
  sample_full->add_option("--model", sf_model, "Full-model checkpoint")->required();
  sample_full->add_option("--temperature", sf_temp, "Prior temperature (0 = argmax)")->capture_default_str();
  sample_full->add_option("--count", sf_count, "Number of images")->capture_default_str();
  sample_full->add_option("--out", sf_out, "Output directory")->required();

  // reconstruct
  Common c_rec;
  std::string rec_model, rec_image, rec_out, rec_canvas;
  auto* reconstruct = app.add_subcommand("reconstruct", "Encode (argmax), render and decode one image");
  add_common(reconstruct, c_rec);
  reconstruct->add_option("--model", rec_model, "Full-model checkpoint")->required();
  reconstruct->add_option("--image", rec_image, "Input PGM/PPM")->required();
  reconstruct->add_option("--out", rec_out, "Decoded PGM/PPM")->required();
  reconstruct->add_option("--canvas-out", rec_canvas, "Also write the latent canvas");

  // edit compose
  auto* edit = app.add_subcommand("edit", "Latent canvas editing");
  edit->require_subcommand(1);
  Common c_cmp;
  std::string cmp_model, cmp_a, cmp_b, cmp_out;
  std::vector<std::size_t> cmp_cells;
  auto* compose = edit->add_subcommand("compose", "Paste cells of B's canvas onto A's canvas and decode");
  add_common(compose, c_cmp);
  compose->add_option("--model", cmp_model, "Full-model checkpoint")->required();
  compose->add_option("--a", cmp_a, "Image A")->required();
  compose->add_option("--b", cmp_b, "Image B")->required();
  compose->add_option("--cells", cmp_cells, "1-based cells taken from B")->delimiter(',');
  compose->add_option("--out", cmp_out, "Decoded PGM/PPM")->required();

  // serve
  Common c_srv;
  std::string srv_model;
  ServeOptions srv_opts;
  auto* serve = app.add_subcommand("serve", "HTTP editing service");
  add_common(serve, c_srv);
  serve->add_option("--model", srv_model, "Full-model checkpoint (without it, model endpoints answer 503)");
  serve->add_option("--host", srv_opts.host, "Bind address")->capture_default_str();
  serve->add_option("--port", srv_opts.port, "Port (0 = any free port)")->capture_default_str();
  serve->add_option("--cors-origin", srv_opts.cors_origin, "Access-Control-Allow-Origin value")->capture_default_str();

  // ablate
  Common c_abl;
  AblationConfig abl;
  PriorArch abl_prior;
  VaeArch abl_vae;
  std::string abl_train, abl_test, abl_out;
  std::size_t abl_train_limit = 0, abl_test_limit = 0;
  auto* ablate = app.add_subcommand("ablate", "K x M x lambda sweep written as CSV (K,M,lambda,PSNR,NLL,BCE,KLD)");
  add_common(ablate, c_abl);
  ablate->add_option("--train", abl_train, "Training dataset")->required();
  ablate->add_option("--test", abl_test, "Test dataset")->required();
  ablate->add_option("--K", abl.patch_sizes, "Patch sizes")->delimiter(',');
  ablate->add_option("--M", abl.bank_sizes, "Bank sizes")->delimiter(',');
  ablate->add_option("--lambda", abl.lambdas, "Regularizer weights")->delimiter(',');
  ablate->add_option("--per-image", abl.bank.per_image, "Bank patches per image")->capture_default_str();
  ablate->add_option("--cap", abl.bank.cap, "Bank patch cap")->capture_default_str();
  ablate->add_option("--epsilon", abl.parse.epsilon, "Parser draw threshold")->capture_default_str();
  ablate->add_option("--prior-epochs", abl.pretrain.epochs, "Prior epochs")->capture_default_str();
  ablate->add_option("--prior-batch", abl.pretrain.batch, "Prior batch")->capture_default_str();
  ablate->add_option("--prior-lr", abl.pretrain.lr, "Prior learning rate")->capture_default_str();
  ablate->add_option("--epochs", abl.train.epochs, "Model epochs")->capture_default_str();
  ablate->add_option("--batch", abl.train.batch, "Model batch")->capture_default_str();
  ablate->add_option("--lr", abl.train.lr, "Model learning rate")->capture_default_str();
  ablate->add_option("--iwae-k", abl.iwae_k, "Importance samples")->capture_default_str();
  ablate->add_option("--max-train", abl_train_limit, "Use at most this many training images (0 = all)");
  ablate->add_option("--max-test", abl_test_limit, "Use at most this many test images (0 = all)");
  ablate->add_option("--out", abl_out, "Output CSV")->required();
  abl_prior.add(ablate);
  abl_vae.cfg.lambda_reg = 0;
  ablate->add_option("--hidden", abl_vae.cfg.hidden, "Encoder and decoder channels")->capture_default_str();
  ablate->add_option("--head-hidden", abl_vae.cfg.head_hidden, "Posterior head width")->capture_default_str();
  ablate->add_option("--output", abl_vae.output, "bernoulli | logistic_mixture")->capture_default_str();

  if (argc <= 1) {
    std::cout << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "npdraw: " << e.what() << " (run 'npdraw --help')\n";
    return 2;
  }
  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return 2;
  }

  try {
    if (*gen) {
      apply_config(gen, c_gen);
      GlyphGrammar grammar = default_grammar(c_gen.seed);
      auto corpus = gen_glyphs(grammar, gen_train + gen_test);
      Dataset tr = corpus.dataset, te = corpus.dataset;
      tr.images.assign(corpus.dataset.images.begin(), corpus.dataset.images.begin() + static_cast<std::ptrdiff_t>(gen_train));
      te.images.assign(corpus.dataset.images.begin() + static_cast<std::ptrdiff_t>(gen_train), corpus.dataset.images.end());
      fs::create_directories(fs::path(gen_out) / "train");
      fs::create_directories(fs::path(gen_out) / "test");
      write_idx(tr, fs::path(gen_out) / "train" / "images.idx3-ubyte");
      if (!te.images.empty()) write_idx(te, fs::path(gen_out) / "test" / "images.idx3-ubyte");
      save_bank(corpus.alphabet_bank, fs::path(gen_out) / "alphabet.npbk");
      fs::create_directories(fs::path(gen_out) / "programs");
      const ProgramHeader header{corpus.geom.T, corpus.alphabet_bank.size(), corpus.geom.patch_size};
      for (std::size_t i = 0; i < corpus.programs.size(); ++i)
        save_program(fs::path(gen_out) / "programs" / numbered(i, ".nplt"), corpus.programs[i], header);
      write_meta(gen_out, "gen-glyphs", gen, c_gen, {});
      std::cout << "wrote " << gen_train << " train and " << gen_test << " test glyph images to " << gen_out << "\n";
    } else if (*bank_build) {
      apply_config(bank_build, c_bank);
      bank_cfg.seed = c_bank.seed;
      const auto images = load_images(bank_data, bank_limit);
      const PartBank bank = build_bank(images, bank_cfg);
      ensure_parent(bank_out);
      save_bank(bank, bank_out);
      write_meta(bank_out, "bank build", bank_build, c_bank, {bank_data});
      std::cout << "bank: " << bank.size() << " parts of " << bank.patch_size << "x" << bank.patch_size << "x"
                << bank.channels << " -> " << bank_out << "\n";
    } else if (*parse) {
      apply_config(parse, c_parse);
      if (!parse_image_path.empty()) {
        const PartBank bank = load_bank(parse_bank);
        const Image img = read_image(parse_image_path);
        const auto geom = make_geometry(img.height, img.width, bank.patch_size);
        const auto program = parse_image(img, bank, geom, parse_cfg);
        ensure_parent(parse_out);
        save_program(parse_out, program, ProgramHeader{geom.T, bank.size(), geom.patch_size});
        write_meta(parse_out, "parse", parse, c_parse, {parse_image_path, parse_bank});
        std::printf("parsed %s, T=%zu, parse PSNR %.3f dB\n", parse_image_path.c_str(), geom.T,
                    mean_parse_psnr({img}, {program}, bank, geom));
        return 0;
      }
      if (parse_data.empty()) throw UsageError("parse needs --data or --image");
      const auto images = load_images(parse_data, parse_limit);
      const PartBank bank = load_bank(parse_bank);
      const auto geom = geometry_for(images, bank.patch_size);
      const auto programs = parse_corpus(images, bank, geom, parse_cfg);
      fs::create_directories(parse_out);
      const ProgramHeader header{geom.T, bank.size(), geom.patch_size};
      for (std::size_t i = 0; i < programs.size(); ++i)
        save_program(fs::path(parse_out) / numbered(i, ".nplt"), programs[i], header);
      write_meta(parse_out, "parse", parse, c_parse, {parse_data, parse_bank});
      std::printf("parsed %zu images, T=%zu, parse PSNR %.3f dB\n", images.size(), geom.T,
                  mean_parse_psnr(images, programs, bank, geom));
    } else if (*pretrain) {
      apply_config(pretrain, c_pre);
      pre_cfg.seed = c_pre.seed;
      const auto images = load_images(pre_data, pre_limit);
      const PartBank bank = load_bank(pre_bank);
      const auto geom = geometry_for(images, bank.patch_size);
      const auto programs = parse_corpus(images, bank, geom, pre_parse);
      PriorModel<float> model(pre_arch.for_problem(geom, bank.size(), bank.channels), c_pre.seed);
      std::cout << "epoch,steps,train_nll,val_nll\n";
      const auto result = pretrain_prior(model, programs, bank, geom, pre_cfg, [](const PretrainRecord& r) {
        std::printf("%zu,%zu,%.5f,%.5f\n", r.epoch, r.steps, r.train_nll, r.val_nll);
        std::fflush(stdout);
      });
      ensure_parent(pre_out);
      save_checkpoint(prior_checkpoint(model, geom), pre_out);
      write_meta(pre_out, "prior pretrain", pretrain, c_pre, {pre_data, pre_bank});
      std::printf("best epoch %zu, validation NLL %.5f -> %s\n", result.best_epoch, result.best_loss, pre_out.c_str());
    } else if (*prior_sample) {
      apply_config(prior_sample, c_ps);
      const auto prior = prior_from_checkpoint(load_checkpoint(ps_prior));
      const PartBank bank = load_bank(ps_bank);
      fs::create_directories(ps_out);
      std::mt19937_64 rng(c_ps.seed);
      const ProgramHeader header{prior.geom.T, bank.size(), prior.geom.patch_size};
      for (std::size_t i = 0; i < ps_count; ++i) {
        const auto s = sample_prior(prior.model, bank, prior.geom, rng, ps_temp);
        save_program(fs::path(ps_out) / numbered(i, ".nplt"), s.program, header);
        write_image(fs::path(ps_out) / numbered(i, bank.channels == 1 ? ".pgm" : ".ppm"), s.canvas.image());
      }
      write_meta(ps_out, "prior sample", prior_sample, c_ps, {ps_prior, ps_bank});
      std::cout << "wrote " << ps_count << " samples to " << ps_out << "\n";
    } else if (*train) {
      apply_config(train, c_train);
      train_cfg.seed = c_train.seed;
      const auto images = load_images(train_data, train_limit);
      std::optional<FullBundle> bundle;
      std::vector<fs::path> inputs{train_data};
      if (!train_resume.empty()) {
        bundle = full_from_checkpoint(load_checkpoint(train_resume));
        bundle->train.epochs = train_cfg.epochs;
        train_cfg = bundle->train;
        inputs.push_back(train_resume);
      } else {
        if (train_bank.empty() || train_prior.empty()) throw UsageError("train needs --bank and --prior (or --resume)");
        const PartBank bank = load_bank(train_bank);
        const auto prior = prior_from_checkpoint(load_checkpoint(train_prior));
        const auto geom = geometry_for(images, bank.patch_size);
        if (!(geom == prior.geom)) throw std::runtime_error("prior was trained for a different geometry");
        bundle = FullBundle{FullModel<float>(train_arch.resolved(), bank, geom, prior.model, c_train.seed), {}, train_cfg};
        inputs.push_back(train_bank);
        inputs.push_back(train_prior);
      }
      auto& model = bundle->model;
      const auto programs = parse_corpus(images, model.bank(), model.geometry(), train_parse);
      ensure_parent(train_out);
      std::cout << "epoch,loss,neg_elbo,recon,kl,reg,val_loss,seconds\n";
      train_full(model, images, programs, train_cfg, bundle->state, [&](const EpochRecord& r, const TrainState& s) {
        std::printf("%zu,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.1f\n", r.epoch, r.loss, r.neg_elbo, r.recon, r.kl, r.reg,
                    r.val_loss, r.seconds);
        std::fflush(stdout);
        save_checkpoint(full_checkpoint(model, s, train_cfg), train_out);
        return true;
      });
      save_checkpoint(full_checkpoint(model, bundle->state, train_cfg), train_out);
      write_meta(train_out, "train", train, c_train, inputs);
      std::printf("best epoch %zu -> %s\n", bundle->state.best_epoch, train_out.c_str());
    } else if (*eval) {
      apply_config(eval, c_eval);
      auto model = load_full(eval_model);
      const auto images = load_images(eval_data, eval_limit);
      const auto r = eval_nll_iwae(*model, images, eval_k, c_eval.seed);
      const bool gray = model->config().output == OutputDist::Bernoulli;
      const json out = {{"k", eval_k}, {"images", images.size()}, {"nll", r.nll}, {"units", gray ? "nats" : "bits/dim"},
                        {"mean_bound_nats", r.mean_bound}, {"std_error_nats", r.std_error}};
      std::cout << out.dump(2) << "\n";
      if (!eval_out.empty()) {
        ensure_parent(eval_out);
        write_file(eval_out, out.dump(2) + "\n");
        write_meta(eval_out, "eval", eval, c_eval, {eval_model, eval_data});
      }
    } else if (*sample_full) {
      apply_config(sample_full, c_sf);
      auto model = load_full(sf_model);
      fs::create_directories(sf_out);
      std::mt19937_64 rng(c_sf.seed);
      const char* ext = model->bank().channels == 1 ? ".pgm" : ".ppm";
      for (std::size_t i = 0; i < sf_count; ++i) {
        const auto s = sample_prior(model->prior(), model->bank(), model->geometry(), rng, sf_temp);
        write_image(fs::path(sf_out) / numbered(i, ext), model->decode_mean(s.canvas));
      }
      write_meta(sf_out, "sample-full", sample_full, c_sf, {sf_model});
      std::cout << "wrote " << sf_count << " images to " << sf_out << "\n";
    } else if (*reconstruct) {
      apply_config(reconstruct, c_rec);
      auto model = load_full(rec_model);
      const Image img = read_image(rec_image);
      const auto program = model->encode_argmax(img);
      const Canvas canvas = render_program(program, model->bank(), model->geometry());
      ensure_parent(rec_out);
      write_image(rec_out, model->decode_mean(canvas));
      if (!rec_canvas.empty()) write_image(rec_canvas, canvas.image());
      write_meta(rec_out, "reconstruct", reconstruct, c_rec, {rec_model, rec_image});
      std::cout << "reconstructed " << rec_image << " -> " << rec_out << "\n";
    } else if (*compose) {
      apply_config(compose, c_cmp);
      auto model = load_full(cmp_model);
      const auto& g = model->geometry();
      const auto cells = parse_cells(cmp_cells, g);
      const Canvas a = render_program(model->encode_argmax(read_image(cmp_a)), model->bank(), g);
      const Canvas b = render_program(model->encode_argmax(read_image(cmp_b)), model->bank(), g);
      ensure_parent(cmp_out);
      write_image(cmp_out, model->decode_mean(compose_canvases(a, b, cells, g)));
      write_meta(cmp_out, "edit compose", compose, c_cmp, {cmp_model, cmp_a, cmp_b});
      std::cout << "composed " << cells.size() << " cells -> " << cmp_out << "\n";
    } else if (*serve) {
      apply_config(serve, c_srv);
      EditService service(srv_model.empty() ? nullptr : load_full(srv_model));
      EditServer server(service, srv_opts);
      const int port = server.bind();
      std::cout << "serving on http://" << srv_opts.host << ":" << port << (service.has_model() ? "" : " (no model loaded)")
                << std::endl;
      server.listen();
    } else if (*ablate) {
      apply_config(ablate, c_abl);
      abl.seed = c_abl.seed;
      for (std::size_t k : abl.patch_sizes)
        if (k == 0) throw UsageError("--K values must be positive");
      abl.prior = abl_prior.cfg;
      abl.vae = abl_vae.resolved();
      const auto train_images = load_images(abl_train, abl_train_limit);
      const auto test_images = load_images(abl_test, abl_test_limit);
      ensure_parent(abl_out);
      std::ofstream csv(abl_out);
      if (!csv) throw std::runtime_error("cannot write " + abl_out);
      csv << ablation_csv_header() << "\n";
      std::cout << ablation_csv_header() << "\n";
      run_ablation(train_images, test_images, abl, [&](const AblationRow& r) {
        csv << ablation_csv_row(r) << "\n" << std::flush;
        std::cout << ablation_csv_row(r) << std::endl;
      });
      write_meta(abl_out, "ablate", ablate, c_abl, {abl_train, abl_test});
    }
  } catch (const UsageError& e) {
    std::cerr << "npdraw: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "npdraw: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
