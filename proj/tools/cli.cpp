#include "cli.hpp"

#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "avatar/checkpoint.hpp"
#include "avatar/dataset.hpp"
#include "avatar/diffusion.hpp"
#include "avatar/errors.hpp"
#include "avatar/mesh.hpp"
#include "avatar/metrics.hpp"
#include "avatar/parallel.hpp"
#include "avatar/trainer.hpp"

namespace av::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ad::Tensor;

namespace {

json read_json(const fs::path& file) {
  if (!fs::exists(file)) throw IoError(file.string() + ": no such file");
  try {
    return json::parse(read_file(file));
  } catch (const json::parse_error& e) {
    throw SchemaError(file.string() + ": " + e.what());
  }
}

void require_dir(const fs::path& dir, const char* what) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + ": no such " + what + " directory");
}

// Accepts a training run directory or its ckpt/ subdirectory.
GeneratorCheckpoint open_generator(const fs::path& path) {
  require_dir(path, "checkpoint");
  return load_generator(fs::exists(path / "ckpt" / "meta.json") ? path / "ckpt" : path);
}

void write_png(const fs::path& file, const Image& img) { write_file_atomic(file, encode_png(img)); }

std::string numbered(const char* stem, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.png", stem, i);
  return buf;
}

// Yaw steps around the full circle at zero pitch, starting from the back.
std::vector<SphericalPose> yaw_ring(int views) {
  std::vector<SphericalPose> poses;
  for (int j = 0; j < views; ++j) poses.push_back(SphericalPose::make(-180.0 + 360.0 * j / views, 0.0));
  return poses;
}

// One image per (z row, pose); the generator is conditioned on the front pose
// so that an identity keeps its style across views.
Image render_one(const GeneratorCheckpoint& g, const Tensor& z, const SphericalPose& pose) {
  const SphericalPose front = SphericalPose::make(0.0, 0.0);
  const std::vector<SphericalPose> cond{front}, view{pose};
  return to_image(generate(g.config, g.ema, z, gpc_labels(cond), view).rgb, 0);
}

Tensor z_row(const Tensor& z, std::size_t row) {
  const auto v = z.values();
  const std::size_t d = z.dim(1);
  return Tensor::from({1, d}, std::span<const double>(v.data() + row * d, d), z.dtype());
}

struct Registered {
  CLI::App* app;
  std::function<void()> run;
};

// All subcommands and their handlers. Option targets live in `store`.
std::unique_ptr<CLI::App> build(std::vector<Registered>& subs, std::ostream& out,
                                std::vector<std::shared_ptr<void>>& store) {
  auto app = std::make_unique<CLI::App>("Pose-conditioned 3D avatar GAN toolkit", "avatar");
  app->require_subcommand(1);
  auto threads = std::make_shared<int>(0);
  store.push_back(threads);
  app->add_option("--threads", *threads, "Worker threads, 0 = all cores; results do not depend on it")
      ->check(CLI::NonNegativeNumber);
  app->parse_complete_callback([threads] { set_thread_count(*threads); });

  auto hold = [&store](auto value) {
    auto p = std::make_shared<decltype(value)>(std::move(value));
    store.push_back(p);
    return p;
  };

  {
    auto* s = app->add_subcommand("synth-data", "Render an oracle dataset");
    auto config = hold(std::string());
    auto dir = hold(std::string());
    auto backend = hold(std::string("oracle"));
    auto url = hold(RemoteBackendConfig{}.url);
    s->add_option("--config", *config, "Synthesis config JSON (defaults when omitted)");
    s->add_option("--out", *dir, "Output dataset directory")->required();
    s->add_option("--backend", *backend, "Image source")->check(CLI::IsMember({"oracle", "remote"}));
    s->add_option("--url", *url, "Remote backend base URL");
    subs.push_back({s, [=, &out] {
                      SynthConfig c;
                      if (!config->empty()) c = synth_config_from_json(read_json(*config));
                      std::unique_ptr<ImageBackend> remote;
                      if (*backend == "remote") remote = std::make_unique<RemoteBackend>(RemoteBackendConfig{*url});
                      const json m = synth_dataset(c, *dir, remote.get());
                      out << "wrote " << m["records"].size() << " records to " << *dir << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("train-gan", "Train the generator and discriminator");
    auto data = hold(std::string());
    auto config = hold(std::string());
    auto seed = hold(std::uint64_t{0});
    auto dir = hold(std::string());
    auto resume = hold(false);
    s->add_option("--data", *data, "Dataset directory")->required();
    s->add_option("--config", *config, "Training config JSON (defaults when omitted)");
    s->add_option("--seed", *seed, "Run seed");
    s->add_option("--out", *dir, "Run directory")->required();
    s->add_flag("--resume", *resume, "Continue from the run directory's checkpoint");
    subs.push_back({s, [=, &out] {
                      require_dir(*data, "dataset");
                      TrainConfig c;
                      if (!config->empty()) c = train_config_from_json(read_json(*config));
                      const Dataset d = load_dataset(*data);
                      TrainOptions o;
                      o.resume = *resume;
                      const TrainResult r = train(d, c, *seed, *dir, o);
                      out << "trained " << r.iterations_done << " iterations; checkpoint " << r.checkpoint.string()
                          << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("ablate", "Train and score the three label variants over several seeds");
    auto data = hold(std::string());
    auto config = hold(std::string());
    auto seeds = hold(3);
    auto report = hold(std::string());
    auto work = hold(std::string());
    auto samples = hold(AblationOptions{}.eval_samples);
    auto variants = hold(std::vector<std::string>{"cof", "fine_only", "coarse_only"});
    auto resume = hold(false);
    s->add_option("--data", *data, "Dataset directory")->required();
    s->add_option("--config", *config, "Base training config JSON (defaults when omitted)");
    s->add_option("--seeds", *seeds, "Number of seeds, 0..n-1 (at least 3)");
    s->add_option("--out", *report, "Report JSON file")->required();
    s->add_option("--work", *work, "Directory for the runs (default: <out stem>_runs next to the report)");
    s->add_option("--eval-samples", *samples, "Views per scored run");
    s->add_option("--variants", *variants, "Label variants")->check(CLI::IsMember({"cof", "fine_only", "coarse_only"}));
    s->add_flag("--resume", *resume, "Continue interrupted runs and re-score finished ones");
    subs.push_back({s, [=, &out] {
                      require_dir(*data, "dataset");
                      TrainConfig c;
                      if (!config->empty()) c = train_config_from_json(read_json(*config));
                      const Dataset d = load_dataset(*data);
                      AblationOptions o;
                      o.seeds.clear();
                      for (int i = 0; i < *seeds; ++i) o.seeds.push_back(static_cast<std::uint64_t>(i));
                      o.eval_samples = *samples;
                      o.resume = *resume;
                      o.variants.clear();
                      for (const auto& v : *variants) o.variants.push_back(label_mode_from_name(v));
                      o.progress = [&out](const std::string& msg) { out << msg << "\n" << std::flush; };
                      const fs::path rp(*report);
                      const fs::path wd = work->empty() ? rp.parent_path() / (rp.stem().string() + "_runs") : fs::path(*work);
                      const json r = ablation(d, c, wd, o);
                      write_file_atomic(rp, r.dump(1) + "\n");
                      out << r["median"].dump() << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("train-prior", "Fit the conditional style prior to a trained generator");
    auto gan = hold(std::string());
    auto config = hold(std::string());
    auto seed = hold(std::uint64_t{0});
    auto dir = hold(std::string());
    s->add_option("--gan", *gan, "Generator run or checkpoint directory")->required();
    s->add_option("--config", *config, "Prior config JSON (defaults when omitted)");
    s->add_option("--seed", *seed, "Seed for pairs and training");
    s->add_option("--out", *dir, "Prior directory")->required();
    subs.push_back({s, [=, &out] {
                      const GeneratorCheckpoint g = open_generator(*gan);
                      PriorConfig c;
                      if (!config->empty()) c = prior_config_from_json(read_json(*config));
                      const StylePrior p = train_prior(g.config, g.ema, c, *seed);
                      save_prior(*dir, p);
                      out << "prior trained on " << c.pairs << " pairs; saved to " << *dir << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("sample", "Render random identities");
    auto gan = hold(std::string());
    auto n = hold(16);
    auto poses = hold(std::string("grid"));
    auto views = hold(8);
    auto seed = hold(std::uint64_t{0});
    auto dir = hold(std::string());
    s->add_option("--gan", *gan, "Generator run or checkpoint directory")->required();
    s->add_option("--n", *n, "Identities")->check(CLI::PositiveNumber);
    s->add_option("--poses", *poses, "grid: a ring of views per identity; random: one random view each")
        ->check(CLI::IsMember({"grid", "random"}));
    s->add_option("--views", *views, "Views per identity in grid mode")->check(CLI::PositiveNumber);
    s->add_option("--seed", *seed, "Sampling seed");
    s->add_option("--out", *dir, "Image directory")->required();
    subs.push_back({s, [=, &out] {
                      const GeneratorCheckpoint g = open_generator(*gan);
                      Rng rng(*seed);
                      const Tensor z = sample_z(rng, *n, g.config.d_z);
                      fs::create_directories(*dir);
                      std::size_t written = 0;
                      for (int i = 0; i < *n; ++i) {
                        const Tensor zi = z_row(z, static_cast<std::size_t>(i));
                        if (*poses == "grid") {
                          const auto ring = yaw_ring(*views);
                          for (std::size_t j = 0; j < ring.size(); ++j, ++written) {
                            char name[64];
                            std::snprintf(name, sizeof name, "sample_%03d_view_%02zu.png", i, j);
                            write_png(fs::path(*dir) / name, render_one(g, zi, ring[j]));
                          }
                        } else {
                          write_png(fs::path(*dir) / numbered("sample", static_cast<std::size_t>(i)),
                                    render_one(g, zi, sample_pose(rng)));
                          ++written;
                        }
                      }
                      out << "wrote " << written << " images to " << *dir << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("latent-walk", "Interpolate the latent and the yaw together");
    auto gan = hold(std::string());
    auto steps = hold(16);
    auto seed = hold(std::uint64_t{0});
    auto yaw_from = hold(-90.0);
    auto yaw_to = hold(90.0);
    auto dir = hold(std::string());
    s->add_option("--gan", *gan, "Generator run or checkpoint directory")->required();
    s->add_option("--steps", *steps, "Frames, endpoints included (at least 2)");
    s->add_option("--seed", *seed, "Seed for the two endpoint latents");
    s->add_option("--yaw-from", *yaw_from, "Yaw of the first frame, degrees");
    s->add_option("--yaw-to", *yaw_to, "Yaw of the last frame, degrees");
    s->add_option("--out", *dir, "Image directory")->required();
    subs.push_back({s, [=, &out] {
                      if (*steps < 2) throw std::invalid_argument("latent-walk: --steps must be at least 2");
                      const GeneratorCheckpoint g = open_generator(*gan);
                      Rng rng(*seed);
                      const Tensor z = sample_z(rng, 2, g.config.d_z);
                      const auto zv = z.values();
                      const std::size_t d = static_cast<std::size_t>(g.config.d_z);
                      fs::create_directories(*dir);
                      json frames = json::array();
                      for (int k = 0; k < *steps; ++k) {
                        const double t = static_cast<double>(k) / (*steps - 1);
                        std::vector<double> zt(d);
                        for (std::size_t i = 0; i < d; ++i) zt[i] = (1 - t) * zv[i] + t * zv[d + i];
                        const double yaw = (1 - t) * *yaw_from + t * *yaw_to;
                        const std::string name = numbered("walk", static_cast<std::size_t>(k));
                        write_png(fs::path(*dir) / name,
                                  render_one(g, Tensor::from({1, d}, zt, z.dtype()), SphericalPose::make(yaw, 0.0)));
                        frames.push_back({{"file", name}, {"t", t}, {"yaw_deg", yaw}});
                      }
                      write_file_atomic(fs::path(*dir) / "walk.json", json{{"seed", *seed}, {"frames", frames}}.dump(1) + "\n");
                      out << "wrote " << *steps << " frames to " << *dir << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("gen-conditioned", "Generate an avatar whose front view resembles an image");
    auto gan = hold(std::string());
    auto prior = hold(std::string());
    auto image = hold(std::string());
    auto seed = hold(std::uint64_t{0});
    auto lambda = hold(std::optional<double>());
    auto views = hold(8);
    auto dir = hold(std::string());
    s->add_option("--gan", *gan, "Generator run or checkpoint directory")->required();
    s->add_option("--prior", *prior, "Prior directory")->required();
    s->add_option("--image", *image, "Condition image: .ppm, or raw little-endian float32 3xRxR")->required();
    s->add_option("--seed", *seed, "Sampling seed");
    s->add_option("--lambda", *lambda, "Guidance scale (default: the prior's)");
    s->add_option("--views", *views, "Rendered views around the avatar")->check(CLI::PositiveNumber);
    s->add_option("--out", *dir, "Output directory")->required();
    subs.push_back({s, [=, &out] {
                      const GeneratorCheckpoint g = open_generator(*gan);
                      require_dir(*prior, "prior");
                      const StylePrior p = load_prior(*prior);
                      if (!fs::exists(*image)) throw IoError(*image + ": no such file");
                      const fs::path ip(*image);
                      const Image cond = ip.extension() == ".ppm"
                                             ? load_ppm(ip)
                                             : load_raw(ip, 3, p.resolution, p.resolution);
                      const auto ring = yaw_ring(*views);
                      const ConditionedAvatar a = generate_conditioned(cond, g.config, g.ema, p, ring, *seed, *lambda);
                      fs::create_directories(*dir);
                      for (std::size_t j = 0; j < a.views.size(); ++j)
                        write_png(fs::path(*dir) / numbered("view", j), a.views[j]);
                      json meta{{"seed", *seed},
                                {"w", std::vector<double>(a.w.data(), a.w.data() + a.w.size())},
                                {"yaw_deg", json::array()}};
                      for (const auto& pose : ring) meta["yaw_deg"].push_back(pose.yaw_deg);
                      write_file_atomic(fs::path(*dir) / "avatar.json", meta.dump(1) + "\n");
                      out << "wrote " << a.views.size() << " views to " << *dir << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("export-mesh", "Extract an identity's isosurface as OBJ");
    auto gan = hold(std::string());
    auto seed = hold(std::uint64_t{0});
    auto res = hold(64);
    auto iso = hold(kDefaultIso);
    auto file = hold(std::string());
    s->add_option("--gan", *gan, "Generator run or checkpoint directory")->required();
    s->add_option("--seed", *seed, "Identity seed");
    s->add_option("--res", *res, "Grid points per axis")->check(CLI::Range(2, 512));
    s->add_option("--iso", *iso, "Density level of the surface");
    s->add_option("--out", *file, "OBJ file")->required();
    subs.push_back({s, [=, &out] {
                      const GeneratorCheckpoint g = open_generator(*gan);
                      Rng rng(*seed);
                      const Tensor z = sample_z(rng, 1, g.config.d_z);
                      const std::vector<SphericalPose> front{SphericalPose::make(0.0, 0.0)};
                      const Tensor planes = synthesize(g.config, g.ema, map_style(g.config, g.ema, z, gpc_labels(front)));
                      const Mesh m = marching_cubes(sample_density_grid(g.config, g.ema, planes, *res), *iso);
                      export_obj(m, *file);
                      out << m.vertices.size() << " vertices, " << m.triangles.size() << " triangles -> " << *file
                          << "\n";
                    }});
  }
  {
    auto* s = app->add_subcommand("eval-fd", "Score a generator against a dataset from random views");
    auto gan = hold(std::string());
    auto data = hold(std::string());
    auto n = hold(2000);
    auto seed = hold(std::uint64_t{0});
    auto file = hold(std::string());
    s->add_option("--gan", *gan, "Generator run or checkpoint directory")->required();
    s->add_option("--data", *data, "Reference dataset directory")->required();
    s->add_option("--n", *n, "Generated views")->check(CLI::PositiveNumber);
    s->add_option("--seed", *seed, "Evaluation seed");
    s->add_option("--out", *file, "Also write the score JSON here");
    subs.push_back({s, [=, &out] {
                      const GeneratorCheckpoint g = open_generator(*gan);
                      require_dir(*data, "dataset");
                      const Dataset d = load_dataset(*data);
                      const FeatureExtractor fx(FeatureConfig{g.config.resolution});
                      GeneratorSource src(g.config, g.ema);
                      const FdScore sc =
                          eval_protocol(src, reference_stats(fx, d), fx, static_cast<std::size_t>(*n), *seed);
                      const std::string text = fd_score_to_json(sc).dump(1) + "\n";
                      if (!file->empty()) write_file_atomic(*file, text);
                      out << text;
                    }});
  }
  return app;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<Registered> subs;
  std::vector<std::shared_ptr<void>> store;
  const auto app = build(subs, out, store);
  try {
    app->parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app->exit(e, out, err);
      return kOk;
    }
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  try {
    for (const auto& s : subs)
      if (s.app->parsed()) s.run();
    return kOk;
  } catch (const TrainingDiverged& e) {
    err << "diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const IoError& e) {
    err << "missing: " << e.what() << "\n";
    return kMissing;
  } catch (const fs::filesystem_error& e) {
    err << "missing: " << e.what() << "\n";
    return kMissing;
  } catch (const std::invalid_argument& e) {  // SchemaError and failed validation
    err << "invalid: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kInternal;
  }
}

std::map<std::string, std::vector<std::string>> flag_registry() {
  std::vector<Registered> subs;
  std::vector<std::shared_ptr<void>> store;
  std::ostringstream sink;
  const auto app = build(subs, sink, store);
  std::map<std::string, std::vector<std::string>> out;
  auto names = [](const CLI::App* a) {
    std::vector<std::string> v;
    for (const CLI::Option* o : a->get_options())
      for (const auto& l : o->get_lnames()) v.push_back("--" + l);
    return v;
  };
  out[""] = names(app.get());
  for (const CLI::App* s : app->get_subcommands({})) out[s->get_name()] = names(s);
  return out;
}

}  // namespace av::cli
