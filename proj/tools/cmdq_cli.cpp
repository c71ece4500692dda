// cmdq: command-line front end for the quantization toolkit.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmdq/cmdq.hpp"

namespace {

using nlohmann::json;

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw cmdq::FormatError("cannot open '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw cmdq::FormatError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw cmdq::FormatError("cannot open '" + path + "' for writing");
  f << text << '\n';
}

struct GenModelArgs {
  cmdq::ModelSpec spec;
  bool no_experts = false;
  std::string out;
};

int run_gen_model(GenModelArgs& a) {
  a.spec.experts = !a.no_experts;
  const auto model = cmdq::generate_model(a.spec);
  cmdq::write_container(a.out, cmdq::model_to_container(model));
  std::cout << "wrote " << model.weights.size() << " weight matrices to " << a.out << '\n';
  return 0;
}

struct GenCalibArgs {
  std::string model;
  std::string selector = "vision";
  std::size_t samples = 8;
  std::size_t seq = 0;
  std::size_t image_size = 0;
  std::size_t patch_size = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int run_gen_calib(const GenCalibArgs& a) {
  const auto model = cmdq::model_from_container(cmdq::read_container(a.model));
  const auto selector = a.selector == "vision" ? cmdq::Modality::vision : cmdq::Modality::crossmodal;
  std::size_t seq = a.seq;
  if (a.image_size != 0 || a.patch_size != 0) seq = cmdq::vision_sequence_length(a.image_size, a.patch_size);
  if (seq == 0) throw cmdq::UsageError("give --seq or --image-size/--patch-size");
  if (a.samples == 0) throw cmdq::UsageError("--samples must be positive");

  const std::size_t in_dim = model.vision_layers.empty() ? model.crossmodal_dim : model.vision_dim;
  std::vector<cmdq::DenseMatrix> inputs;
  std::map<std::string, cmdq::DenseMatrix> aux;
  for (std::size_t k = 0; k < a.samples; ++k) {
    inputs.push_back(cmdq::seeded_random_matrix(seq, in_dim, a.seed * 7919ULL + k));
    if (selector == cmdq::Modality::crossmodal) {
      cmdq::DenseMatrix mask(seq, seq);
      for (std::size_t i = 0; i < seq; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask(i, j) = 1.0F;
      cmdq::DenseMatrix token_type(seq, 1);
      for (std::size_t i = 0; i < seq / 2; ++i) token_type(i, 0) = 1.0F;  // leading image tokens
      aux.emplace("attention_mask." + std::to_string(k), std::move(mask));
      aux.emplace("position." + std::to_string(k), cmdq::seeded_random_matrix(seq, model.crossmodal_dim, a.seed * 104729ULL + k));
      aux.emplace("token_type." + std::to_string(k), std::move(token_type));
    }
  }
  const auto calib = cmdq::capture_calibration(model, inputs, selector, std::move(aux));
  cmdq::write_container(a.out, cmdq::calibration_to_container(calib));
  std::cout << "captured " << calib.samples.size() << " x " << seq << " x " << calib.feature_dim() << " "
            << calib.module_id << " calibration rows to " << a.out << '\n';
  return 0;
}

struct QuantizeArgs {
  std::string model, calib_v, calib_m, out, report;
  int bits = 4;
  int groupsize = 128;
  bool rtn = false;
  bool symmetric = false;
  float damp = 0.01F;
};

int run_quantize(const QuantizeArgs& a) {
  cmdq::QuantConfig cfg{a.bits, a.groupsize, a.symmetric, a.damp};
  cfg.validate();
  const auto model = cmdq::model_from_container(cmdq::read_container(a.model));
  std::optional<cmdq::CalibrationSet> cv, cm;
  if (!a.calib_v.empty()) cv = cmdq::calibration_from_container(cmdq::read_container(a.calib_v));
  if (!a.calib_m.empty()) cm = cmdq::calibration_from_container(cmdq::read_container(a.calib_m));
  const auto ckpt =
      cmdq::quantize_model(model, cv, cm, cfg, a.rtn ? cmdq::QuantMethod::rtn : cmdq::QuantMethod::gptq);
  cmdq::write_container(a.out, cmdq::checkpoint_to_container(ckpt));
  const std::string report_path = a.report.empty() ? a.out + ".report.json" : a.report;
  write_text(report_path, cmdq::report_json(ckpt).dump(2));
  for (const auto& r : ckpt.report)
    std::printf("%3zu %-10s %-12s %-28s loss %.6g (rtn %.6g)\n", r.order, std::string(cmdq::modality_name(r.module)).c_str(),
                r.group ? std::string(cmdq::group_name(*r.group)).c_str() : "-", r.name.c_str(), r.proxy_loss,
                r.rtn_proxy_loss);
  std::cout << "wrote " << ckpt.layers.size() << " packed layers to " << a.out << ", report " << report_path << '\n';
  return 0;
}

struct RoundtripArgs {
  int bits = 4;
  std::uint64_t seed = 0;
  std::size_t grids = 500;
};

int run_pack_roundtrip(const RoundtripArgs& a) {
  const std::size_t f = cmdq::lanes_per_word(a.bits);
  std::mt19937_64 gen(a.seed);
  std::uniform_int_distribution<std::uint32_t> code(0, cmdq::lane_mask(a.bits));
  std::uniform_int_distribution<std::size_t> words(1, 8), cols(1, 24);
  std::size_t failures = 0;
  for (std::size_t n = 0; n < a.grids; ++n) {
    cmdq::IntGrid q(words(gen) * f, cols(gen));
    for (auto& v : q.values()) v = code(gen);
    if (cmdq::unpack_weights(cmdq::pack_weights(q, a.bits), a.bits) != q) ++failures;
    if (cmdq::unpack_zeros(cmdq::pack_zeros(q, a.bits), a.bits, q.cols()) != q) ++failures;
  }
  if (failures != 0) throw cmdq::InvariantError(std::to_string(failures) + " pack round-trip failures");
  std::cout << "pack-roundtrip bits=" << a.bits << " grids=" << a.grids << " ok\n";
  return 0;
}

struct BenchArgs {
  std::size_t m = 64, k = 256, d = 256;
  int bits = 4;
  int groupsize = 128;
  std::string configs, trace, ckpt, layer;
  std::size_t runs = 5;
  std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& a) {
  cmdq::PackedLinear layer;
  if (!a.ckpt.empty()) {
    if (a.layer.empty()) throw cmdq::UsageError("--ckpt needs --layer");
    layer = cmdq::read_packed_linear(cmdq::read_container(a.ckpt), a.layer);
  } else {
    cmdq::QuantConfig cfg{a.bits, a.groupsize, false, 0.01F};
    cfg.validate();
    const auto w = cmdq::seeded_random_matrix(a.k, a.d, a.seed + 1);
    layer = cmdq::pack_linear(cmdq::rtn_quantize(w, cfg), std::nullopt, a.groupsize);
  }
  std::vector<cmdq::TileConfig> candidates;
  if (!a.configs.empty()) {
    try {
      candidates = read_json_file(a.configs).get<std::vector<cmdq::TileConfig>>();
    } catch (const json::exception& e) {
      throw cmdq::FormatError("'" + a.configs + "' is not a TileConfig array: " + e.what());
    }
  } else {
    candidates = cmdq::default_tile_candidates(layer.bits, std::max(1U, std::thread::hardware_concurrency()));
  }

  const auto tuned = cmdq::autotune(a.m, layer.in_features, layer.out_features, layer, candidates, a.runs,
                                    cmdq::steady_now_ns, a.seed);
  std::printf("%-28s %14s\n", "config", "median_ns");
  for (const auto& e : tuned.table)
    std::printf("%-28s %14lld%s\n", e.config.describe().c_str(), static_cast<long long>(e.median_ns),
                e.config == tuned.best ? "  *" : "");
  for (const auto& [c, why] : tuned.rejected) std::printf("%-28s rejected: %s\n", c.describe().c_str(), why.c_str());

  const auto input = cmdq::seeded_random_matrix(a.m, layer.in_features, a.seed + 2);
  cmdq::SpanRecorder recorder(tuned.best.workers);
  const auto out = cmdq::quant_matmul(input, layer, tuned.best, a.trace.empty() ? nullptr : &recorder);
  const auto ref = cmdq::reference_matmul(input, cmdq::dequantize(layer), layer.bias);
  const double err = cmdq::relative_frobenius_error(out, ref);
  std::printf("best %s  rel_err_vs_reference %.3e\n", tuned.best.describe().c_str(), err);
  if (!a.trace.empty()) {
    write_text(a.trace, cmdq::spans_to_json(recorder.spans()).dump(2));
    std::cout << "trace written to " << a.trace << '\n';
  }
  if (!(err <= 1e-5)) throw cmdq::NumericError("kernel disagrees with the reference product");
  return 0;
}

struct SizeArgs {
  std::string model;
  int bits = 4;
  int groupsize = 128;
};

int run_size(const SizeArgs& a) {
  const auto model = cmdq::model_from_container(cmdq::read_container(a.model));
  const auto r = cmdq::size_report(cmdq::layer_shapes(model), model.misc_params, a.bits, a.groupsize);
  std::cout << cmdq::size_report_json(r).dump(2) << '\n';
  return 0;
}

int run_eval_circular(const std::string& path) {
  const auto records = cmdq::circular_records_from_json(read_json_file(path));
  std::cout << cmdq::circular_eval_accuracy(records) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal post-training weight quantization toolkit"};
  app.require_subcommand(1);

  GenModelArgs gm;
  auto* gen_model = app.add_subcommand("gen-model", "Emit a synthetic model container");
  gen_model->add_option("--vision-layers", gm.spec.vision_layers)->required();
  gen_model->add_option("--crossmodal-layers", gm.spec.crossmodal_layers)->required();
  gen_model->add_option("--dim", gm.spec.dim)->required();
  gen_model->add_option("--seed", gm.spec.seed)->required();
  gen_model->add_option("--misc", gm.spec.misc_params, "Unquantized parameter count");
  gen_model->add_option("--ffn-multiplier", gm.spec.ffn_multiplier);
  gen_model->add_flag("--no-experts", gm.no_experts);
  gen_model->add_option("--out", gm.out)->required();

  GenCalibArgs gc;
  auto* gen_calib = app.add_subcommand("gen-calib", "Capture a calibration set from random model inputs");
  gen_calib->add_option("--model", gc.model)->required();
  gen_calib->add_option("--selector", gc.selector)->check(CLI::IsMember({"vision", "crossmodal"}));
  gen_calib->add_option("--samples", gc.samples);
  gen_calib->add_option("--seq", gc.seq);
  gen_calib->add_option("--image-size", gc.image_size);
  gen_calib->add_option("--patch-size", gc.patch_size);
  gen_calib->add_option("--seed", gc.seed);
  gen_calib->add_option("--out", gc.out)->required();

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "Quantize a model module by module");
  quantize->add_option("--model", qa.model)->required();
  quantize->add_option("--calib-v", qa.calib_v);
  quantize->add_option("--calib-m", qa.calib_m);
  quantize->add_option("--bits", qa.bits)->required();
  quantize->add_option("--groupsize", qa.groupsize)->required();
  quantize->add_option("--damp", qa.damp);
  quantize->add_flag("--rtn", qa.rtn, "Round-to-nearest baseline instead of GPTQ");
  quantize->add_flag("--symmetric", qa.symmetric);
  quantize->add_option("--report", qa.report, "Report path (default <out>.report.json)");
  quantize->add_option("--out", qa.out)->required();

  RoundtripArgs ra;
  auto* roundtrip = app.add_subcommand("pack-roundtrip", "Pack/unpack property smoke test");
  roundtrip->add_option("--bits", ra.bits)->required();
  roundtrip->add_option("--seed", ra.seed)->required();
  roundtrip->add_option("--grids", ra.grids);

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Autotune and time the fused kernel");
  bench->add_option("--m", ba.m)->required();
  bench->add_option("--k", ba.k);
  bench->add_option("--d", ba.d);
  bench->add_option("--bits", ba.bits);
  bench->add_option("--groupsize", ba.groupsize);
  bench->add_option("--configs", ba.configs, "JSON array of tile configs");
  bench->add_option("--runs", ba.runs);
  bench->add_option("--seed", ba.seed);
  bench->add_option("--trace", ba.trace, "Write the span tree of the final run");
  bench->add_option("--ckpt", ba.ckpt, "Benchmark a layer from a quantized checkpoint");
  bench->add_option("--layer", ba.layer);

  SizeArgs sa;
  auto* size = app.add_subcommand("size", "Analytic storage report");
  size->add_option("--model", sa.model)->required();
  size->add_option("--bits", sa.bits)->required();
  size->add_option("--groupsize", sa.groupsize)->required();

  std::string records;
  auto* eval = app.add_subcommand("eval-circular", "CircularEval accuracy of a record file");
  eval->add_option("--records", records)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "cmdq: usage error: " << e.what() << '\n';
    return static_cast<int>(cmdq::ErrorKind::usage);
  }

  try {
    if (*gen_model) return run_gen_model(gm);
    if (*gen_calib) return run_gen_calib(gc);
    if (*quantize) return run_quantize(qa);
    if (*roundtrip) return run_pack_roundtrip(ra);
    if (*bench) return run_bench(ba);
    if (*size) return run_size(sa);
    if (*eval) return run_eval_circular(records);
  } catch (const cmdq::Error& e) {
    std::cerr << "cmdq: error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "cmdq: internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
