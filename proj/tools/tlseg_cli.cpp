// Copyright 2026 The tlseg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// tlseg: range-image projection, training, evaluation and synthetic data.
//
// Exit codes: 0 success, 1 internal error, 2 invalid input, 3 numeric abort.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tlseg/checkpoint.hpp"
#include "tlseg/data_io.hpp"
#include "tlseg/network.hpp"
#include "tlseg/postprocess_eval.hpp"
#include "tlseg/sensor_geometry.hpp"
#include "tlseg/training.hpp"

namespace {

using namespace tlseg;

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::numeric: return kExitNumeric;
    case ErrorKind::state: return kExitInternal;
    default: return kExitInput;
  }
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> mode;
  std::optional<std::string> update;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "YAML run configuration");
  cmd->add_option("--seed", c.seed, "random seed (overrides the config)");
  cmd->add_option("--out", c.out, "output path");
  cmd->add_option("--mode", c.mode, "projection mode")->check(CLI::IsMember({"simple", "adaptive"}));
  cmd->add_option("--update", c.update, "memory update")->check(CLI::IsMember({"none", "residual", "gru"}));
  cmd->add_flag("-v,--verbose", c.verbose, "progress output on stderr");
}

RunConfig resolve_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.seed) rc.train.seed = *c.seed;
  if (c.mode) rc.model.projection = parse_projection_mode(*c.mode);
  if (c.update) rc.model.update = parse_memory_update(*c.update);
  return rc;
}

void print_resolved(std::ostream& os, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) os << "# " << line << '\n';
}

struct Dataset {
  std::optional<SensorModel> sensor;
  std::optional<ClassMapping> mapping;
  std::vector<Sequence> sequences;
};

Dataset load_manifests(const std::vector<std::string>& paths) {
  Dataset d;
  for (const auto& p : paths) {
    auto s = load_sequence(p);
    if (s.frames.empty()) throw Error(ErrorKind::validation, "manifest '" + p + "' has no frames");
    if (d.sensor && (d.sensor->height() != s.sensor.height() || d.sensor->width() != s.sensor.width())) {
      throw Error(ErrorKind::validation, "manifests use different sensor resolutions");
    }
    if (d.mapping && d.mapping->num_classes() != s.mapping.num_classes()) {
      throw Error(ErrorKind::validation, "manifests use different class mappings");
    }
    d.sensor = s.sensor;
    d.mapping = s.mapping;
    d.sequences.push_back(std::move(s.frames));
  }
  return d;
}

// ---------------------------------------------------------------------------

struct ProjectArgs {
  std::string scan;
  std::string sensor;
};

int cmd_project(const Common& c, const ProjectArgs& a) {
  const SensorModel m = load_sensor_model(a.sensor);
  const ProjectionMode mode = parse_projection_mode(c.mode.value_or("adaptive"));
  std::cout << "# command: project\n# scan: " << a.scan << "\n# sensor: " << a.sensor << "\n# mode: " << to_string(mode)
            << "\n# seed: " << c.seed.value_or(0) << '\n';
  const PointCloud pc = read_scan(a.scan);
  if (pc.size() == 0) throw Error(ErrorKind::validation, "scan '" + a.scan + "' is empty");
  const RangeImage ri = build_range_image(pc, m, mode);
  if (!c.out.empty()) {
    Checkpoint ck;
    const auto h = static_cast<std::uint64_t>(ri.height);
    const auto w = static_cast<std::uint64_t>(ri.width);
    ck.add("range_image", DType::f32, {static_cast<std::uint64_t>(kNumChannels), h, w}, ri.channels);
    ck.add("pixel_to_point", DType::i64, {h, w}, std::vector<double>(ri.pixel_to_point.begin(), ri.pixel_to_point.end()));
    std::vector<double> p2p;
    for (const auto& px : ri.point_to_pixel) {
      p2p.push_back(px.u);
      p2p.push_back(px.v);
    }
    ck.add("point_to_pixel", DType::i64, {pc.size(), 2}, std::move(p2p));
    ck.save(c.out);
  }
  std::cout << "n=" << ri.point_count() << "\tcollision_free=" << ri.collision_free_count << "\tclamped="
            << ri.clamped_count << "\tfraction=" << std::fixed << std::setprecision(4) << collision_free_fraction(ri)
            << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::vector<std::string> manifests;
  std::string resume;
  std::string log;
};

std::vector<PreparedSequence> prepare_all(const std::vector<Sequence>& seqs, const SensorModel& m, ProjectionMode mode,
                                          bool flip) {
  std::vector<PreparedSequence> out;
  for (const auto& s : seqs) {
    if (!flip) {
      out.push_back(prepare_sequence(s, m, mode));
      continue;
    }
    Sequence f;
    for (const auto& fr : s) f.push_back(flip_frame(fr));
    out.push_back(prepare_sequence(f, m, mode));
  }
  return out;
}

int cmd_train(const Common& c, const TrainArgs& a) {
  RunConfig rc = resolve_config(c);
  if (c.out.empty()) throw Error(ErrorKind::validation, "train needs --out for the checkpoint");
  const Dataset d = load_manifests(a.manifests);
  rc.model.num_classes = d.mapping->num_classes();
  std::cout << "# command: train\n# config_hash: " << rc.hash() << '\n';
  print_resolved(std::cout, rc.to_yaml());

  const auto data = prepare_all(d.sequences, *d.sensor, rc.model.projection, false);
  std::vector<PreparedSequence> flipped;
  if (rc.train.augment.flip_probability > 0.0) flipped = prepare_all(d.sequences, *d.sensor, rc.model.projection, true);
  const ClassWeights weights = compute_class_weights(pixel_histogram(data, rc.model.num_classes));

  Model<float> model(rc.model, rc.train.seed);
  Trainer<float> trainer(model, rc.train, weights);
  if (!a.resume.empty()) trainer.load(Checkpoint::load(a.resume));

  const std::string log_path = a.log.empty() ? c.out + ".metrics.tsv" : a.log;
  std::ofstream log(log_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw Error(ErrorKind::io, "cannot write metrics log '" + log_path + "'");
  if (a.resume.empty()) log << "iteration\tframe\tloss\tlr\n";
  trainer.on_update = [&](const UpdateLog& u) {
    log << u.iteration << '\t' << u.frame << '\t' << std::setprecision(9) << u.loss << '\t' << u.learning_rate << '\n';
    if (c.verbose) std::cerr << "iteration " << u.iteration << " loss " << u.loss << '\n';
  };
  trainer.on_nan = [&](const Checkpoint& dump) {
    dump.save(c.out + ".nan_dump");
    std::cerr << "non-finite loss; offending batch written to " << c.out << ".nan_dump\n";
  };
  const std::int64_t start = trainer.iteration();
  trainer.train(data, flipped);

  Checkpoint ck;
  trainer.save(ck);
  ck.save(c.out);
  std::cout << "iterations\t" << start << "\t" << trainer.iteration() << "\ncheckpoint\t" << c.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> manifests;
  std::string checkpoint;
  std::string labels_dir;
  EvalOptions options;
  bool strict = false;
};

int cmd_eval(const Common& c, EvalArgs a) {
  RunConfig rc = resolve_config(c);
  const Dataset d = load_manifests(a.manifests);
  rc.model.num_classes = d.mapping->num_classes();
  Model<float> model(rc.model, rc.train.seed);
  model.parameters().load_from(Checkpoint::load(a.checkpoint));

  std::ostringstream report;
  report << "# command: eval\n# config_hash: " << rc.hash() << "\n# seed: " << rc.train.seed << '\n';
  report << "# flags: empty_memory=" << a.options.empty_memory << " tma=" << a.options.use_alignment
         << " majority_vote=" << a.options.majority_vote << " knn=" << a.options.knn << " k=" << a.options.knn_options.k
         << " strict=" << a.strict << '\n';
  print_resolved(report, rc.to_yaml());

  ConfusionMatrix cm(rc.model.num_classes);
  for (std::size_t s = 0; s < d.sequences.size(); ++s) {
    const auto prepared = prepare_sequence(d.sequences[s], *d.sensor, rc.model.projection);
    const auto predictions =
        evaluate_sequence(model, prepared, d.sequences[s], *d.sensor, a.options, cm, d.mapping->ignore_id());
    if (a.labels_dir.empty()) continue;
    const auto dir = std::filesystem::path(a.labels_dir) / ("seq" + std::to_string(s));
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < predictions.size(); ++t) {
      std::ostringstream name;
      name << std::setw(6) << std::setfill('0') << t << ".label";
      write_labels((dir / name.str()).string(),
                   std::vector<std::uint32_t>(predictions[t].begin(), predictions[t].end()));
    }
  }
  report << format_report(miou(cm, a.strict), d.mapping->class_names());
  if (c.out.empty()) {
    std::cout << report.str();
  } else {
    std::ofstream f(c.out, std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write report '" + c.out + "'");
    f << report.str();
    std::cout << report.str();
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string scene;
  std::string mapping;
};

int cmd_synth(const Common& c, const SynthArgs& a) {
  if (c.out.empty()) throw Error(ErrorKind::validation, "synth needs --out for the sequence directory");
  const std::uint64_t seed = c.seed.value_or(1);
  const SyntheticSceneSpec spec = a.scene.empty() ? make_random_scene(RandomSceneOptions{}, seed)
                                                  : SyntheticSceneSpec::load(a.scene);
  std::string mapping_yaml(kSyntheticMappingYaml);
  if (!a.mapping.empty()) mapping_yaml = read_text(a.mapping);
  std::cout << "# command: synth\n# scene: " << (a.scene.empty() ? "random" : a.scene) << "\n# seed: " << seed
            << "\n# frames: " << spec.frames << "\n# boxes: " << spec.boxes.size() << '\n';
  const auto frames = generate_synthetic(spec, seed);
  const std::string manifest = write_synthetic_sequence(frames, spec.sensor, mapping_yaml, c.out);
  std::cout << "manifest\t" << manifest << "\nframes\t" << frames.size() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tlseg: temporal lidar range-image segmentation"};
  app.require_subcommand(1);

  Common common;
  ProjectArgs project;
  TrainArgs train;
  EvalArgs eval;
  SynthArgs synth;

  auto* p = app.add_subcommand("project", "project a scan into a range image and report collision statistics");
  add_common(p, common);
  p->add_option("--scan", project.scan, "scan file (.bin)")->required();
  p->add_option("--sensor", project.sensor, "sensor YAML")->required();

  auto* t = app.add_subcommand("train", "train a model on one or more sequences");
  add_common(t, common);
  t->add_option("--manifest", train.manifests, "sequence manifest(s)")->required();
  t->add_option("--resume", train.resume, "checkpoint to continue from");
  t->add_option("--log", train.log, "metrics log (default <out>.metrics.tsv)");

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint and report per-class IoU");
  add_common(e, common);
  e->add_option("--manifest", eval.manifests, "sequence manifest(s)")->required();
  e->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
  e->add_flag("--empty-memory", eval.options.empty_memory, "feed an all-zero memory every frame");
  bool no_tma = false;
  e->add_flag("--no-tma", no_tma, "pass the memory on without alignment");
  e->add_flag("--majority-vote", eval.options.majority_vote, "vote over the last 5 warped predictions");
  e->add_flag("--knn", eval.options.knn, "k-nearest-neighbor back-projection of pixel labels");
  e->add_option("--k", eval.options.knn_options.k, "neighbors for --knn");
  e->add_flag("--strict", eval.strict, "score classes absent from ground truth and prediction as 0");
  e->add_option("--labels-dir", eval.labels_dir, "write per-point predictions as .label files");

  auto* s = app.add_subcommand("synth", "generate a synthetic sequence");
  add_common(s, common);
  s->add_option("--scene", synth.scene, "scene spec YAML (random scene if omitted)");
  s->add_option("--mapping", synth.mapping, "class mapping YAML to ship with the sequence");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*p) return cmd_project(common, project);
    if (*t) return cmd_train(common, train);
    if (*e) {
      eval.options.use_alignment = !no_tma;
      return cmd_eval(common, eval);
    }
    if (*s) return cmd_synth(common, synth);
  } catch (const Error& err) {
    std::cerr << "tlseg: " << err.what() << '\n';
    return exit_code(err.kind());
  } catch (const YAML::Exception& err) {
    std::cerr << "tlseg: configuration error: " << err.what() << '\n';
    return kExitInput;
  } catch (const std::exception& err) {
    std::cerr << "tlseg: internal error: " << err.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}
