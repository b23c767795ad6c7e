// xpbi: run scenes, recompute metrics from frames, run the verification
// suite and the convergence / timestep studies.

#include <xpbi/xpbi.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace xpbi;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int default_threads() {
  if (const char* env = std::getenv("XPBI_THREADS")) {
    const int t = std::atoi(env);
    if (t >= 1) return t;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  localtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// Fresh directory under `root`; never reuses an existing one.
fs::path make_run_dir(const fs::path& root, const std::string& name) {
  const std::string base = (name.empty() ? "run" : name) + "_" + timestamp();
  fs::path dir = root / base;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

struct RunOptions {
  std::string scene;
  std::string out = "runs";
  std::optional<double> dt;
  std::optional<int> iterations;
  std::optional<std::string> backend;
  int threads = 1;
  std::optional<std::uint64_t> seed;
  std::optional<int> frames;
  bool csv_frames = false;
  double residual_threshold = 1e-2;
};

Backend parse_backend(const std::string& s) { return s == "jacobi" ? Backend::Jacobi : Backend::ColoredGaussSeidel; }

int cmd_run(const RunOptions& o) {
  SceneSpec spec;
  try {
    spec = parse_scene(o.scene);
    if (o.dt) spec.solver.dt = *o.dt;
    if (o.iterations) spec.solver.iterations = *o.iterations;
    if (o.backend) spec.solver.backend = parse_backend(*o.backend);
    if (o.seed) spec.seed = *o.seed;
    spec.solver.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  const int frames = o.frames.value_or(spec.frame_count());

  fs::path dir;
  try {
    dir = make_run_dir(o.out, spec.name);
  } catch (const std::exception& e) {
    std::cerr << "error: cannot create run directory under " << o.out << ": " << e.what() << "\n";
    return kExitRuntime;
  }

  nlohmann::json manifest;
  manifest["scene_path"] = fs::absolute(o.scene).string();
  manifest["output_directory"] = fs::absolute(dir).string();
  manifest["overrides"] = {{"dt", o.dt ? nlohmann::json(*o.dt) : nlohmann::json()},
                           {"iterations", o.iterations ? nlohmann::json(*o.iterations) : nlohmann::json()},
                           {"backend", o.backend ? nlohmann::json(*o.backend) : nlohmann::json()},
                           {"threads", o.threads},
                           {"seed", o.seed ? nlohmann::json(*o.seed) : nlohmann::json()},
                           {"frames", frames},
                           {"csv_frames", o.csv_frames}};
  manifest["scene"] = serialize_scene_json(spec);
  std::vector<std::string> files;

  const auto write_manifest = [&](const std::string& status) {
    manifest["status"] = status;
    manifest["files"] = files;
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  };

  int exit_code = kExitOk;
  try {
    Simulation sim(spec, o.threads);
    const auto materials = spec.material_table();
    const KernelSpec kernel = sim.solver().kernel();
    std::ofstream metrics(dir / "metrics.csv");
    std::ofstream diag(dir / "diagnostics.csv");
    if (!metrics || !diag) throw IoError(dir.string() + ": cannot create CSV outputs");
    files.push_back("metrics.csv");
    files.push_back("diagnostics.csv");
    metrics << "step,time,nn_mean,nn_std,max_density,residual_final,residual_relative,converged\n";
    diag << "step,iteration,residual,neighbors_us,correction_us,inelastic_us,other_us,xsph_us,finalize_us\n";

    const int spf = spec.steps_per_frame();
    std::size_t flagged = 0;
    for (int f = 1; f <= frames; ++f) {
      StepDiagnostics last;
      for (int s = 0; s < spf; ++s) {
        last = sim.step();
        const auto& t = last.times;
        const std::string timing = fmt(t.neighbors_us) + "," + fmt(t.correction_us) + "," + fmt(t.inelastic_us) +
                                   "," + fmt(t.other_us) + "," + fmt(t.xsph_us) + "," + fmt(t.finalize_us);
        if (last.residual.empty()) {
          diag << sim.steps() << "," << last.iterations << ",," << timing << "\n";
        } else {
          for (std::size_t i = 0; i < last.residual.size(); ++i)
            diag << sim.steps() << "," << last.residual_iteration[i] << "," << fmt(last.residual[i]) << "," << timing
                 << "\n";
        }
      }
      const Frame frame = make_frame(sim.state(), materials, sim.steps(), sim.time());
      char name[32];
      std::snprintf(name, sizeof name, "frame_%05d.%s", f, o.csv_frames ? "csv" : "bin");
      write_frame(frame, dir / name, o.csv_frames ? FrameFormat::Csv : FrameFormat::Binary);
      files.emplace_back(name);

      const NeighborTable table = build_neighbor_table(sim.state().x, kernel.support, kernel.dimension);
      const DistributionMetrics m = compute_metrics(sim.state(), table, kernel);
      const bool has_res = !last.residual.empty();
      const double rel = last.relative_residual();
      const bool converged = !has_res || rel <= o.residual_threshold;
      if (!converged) ++flagged;
      metrics << sim.steps() << "," << fmt(sim.time()) << "," << (m.defined ? fmt(m.nn_mean) : "") << ","
              << (m.defined ? fmt(m.nn_std) : "") << "," << fmt(m.max_density) << ","
              << (has_res ? fmt(last.residual.back()) : "") << "," << (has_res ? fmt(rel) : "") << ","
              << (converged ? 1 : 0) << "\n";
      metrics.flush();
      std::cout << "frame " << f << "/" << frames << " t=" << sim.time() << (converged ? "" : " [residual above threshold]")
                << "\n";
    }
    char hex[32];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(state_hash(sim.state())));
    manifest["final_state_hash"] = hex;
    manifest["frames_above_residual_threshold"] = flagged;
    write_manifest("completed");
    std::cout << "run directory: " << dir.string() << "\n";
  } catch (const SimulationError& e) {
    std::cerr << "simulation aborted: " << e.what() << "\n  " << e.snapshot() << "\n";
    write_manifest(std::string("aborted: ") + e.what());
    exit_code = kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_manifest(std::string("failed: ") + e.what());
    exit_code = kExitRuntime;
  }
  return exit_code;
}

int cmd_verify(int threads, const std::string& scene_dir, int steps, const std::string& report) {
  VerifyOptions opt;
  opt.threads = threads;
  if (!scene_dir.empty()) opt.scene_dir = scene_dir;
  opt.scene_steps = steps;
  const VerifyResult res = run_verify(opt);
  std::ostringstream csv;
  csv << "check,pass,value,tolerance,detail\n";
  for (const auto& c : res.checks) {
    std::printf("%-48s %s  value=%-12.4g tol=%-10.3g %s\n", c.name.c_str(), c.pass ? "PASS" : "FAIL", c.value,
                c.tolerance, c.detail.c_str());
    csv << c.name << "," << (c.pass ? 1 : 0) << "," << fmt(c.value) << "," << fmt(c.tolerance) << ",\"" << c.detail
        << "\"\n";
  }
  std::printf("digest %016llx\n", static_cast<unsigned long long>(res.digest));
  std::printf("%s\n", res.pass() ? "verify: all checks passed" : "verify: FAILED");
  if (!report.empty()) {
    std::ofstream out(report);
    if (!out) {
      std::cerr << "error: cannot write " << report << "\n";
      return kExitRuntime;
    }
    out << csv.str();
  }
  return res.pass() ? kExitOk : kExitRuntime;
}

int cmd_metrics(const std::vector<std::string>& inputs, const std::string& scene, std::optional<double> radius,
                int dimension, const std::string& out_path) {
  double r = radius.value_or(0.0);
  int d = dimension;
  try {
    if (!scene.empty()) {
      const SceneSpec spec = parse_scene(scene);
      r = spec.particle_radius;
      d = spec.dimension;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (!(r > 0.0)) {
    std::cerr << "error: provide --scene or --radius\n";
    return kExitUsage;
  }
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::directory_iterator(in)) {
        const auto ext = e.path().extension();
        if (e.path().filename().string().rfind("frame_", 0) == 0 && (ext == ".bin" || ext == ".csv"))
          files.push_back(e.path());
      }
    } else {
      files.emplace_back(in);
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    std::cerr << "error: no frame files found\n";
    return kExitUsage;
  }
  const KernelSpec kernel = KernelSpec::make(r, d);
  std::ostringstream csv;
  csv << "step,time,nn_mean,nn_std,max_density\n";
  try {
    for (const auto& f : files) {
      const Frame frame = read_frame(f);
      std::vector<double> mass = frame.mass;
      if (mass.empty()) mass.assign(frame.positions.size(), 1.0);
      const NeighborTable table = build_neighbor_table(frame.positions, kernel.support, d);
      const DistributionMetrics m = compute_metrics(frame.positions, mass, table, kernel);
      csv << frame.step << "," << fmt(frame.time) << "," << (m.defined ? fmt(m.nn_mean) : "") << ","
          << (m.defined ? fmt(m.nn_std) : "") << "," << fmt(m.max_density) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  if (out_path.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream out(out_path);
    if (!out) {
      std::cerr << "error: cannot write " << out_path << "\n";
      return kExitRuntime;
    }
    out << csv.str();
  }
  return kExitOk;
}

struct StudyOptions {
  std::string scene;
  std::string kind = "convergence";
  int warmup = 40;
  int iterations = 50;
  std::vector<double> dts;
  double tolerance = 1e-3;
  double duration = 0.2;
  int max_iterations = 500;
  std::string out;
  int threads = 1;
};

int cmd_study(const StudyOptions& o) {
  SceneSpec spec;
  try {
    spec = parse_scene(o.scene);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  std::ostringstream csv;
  try {
    if (o.kind == "convergence") {
      csv << "backend,iteration,residual,relative\n";
      for (Backend b : {Backend::ColoredGaussSeidel, Backend::Jacobi}) {
        const ResidualTrace t = convergence_trace(spec, o.warmup, b, o.iterations, o.threads);
        for (std::size_t i = 0; i < t.absolute.size(); ++i)
          csv << (b == Backend::Jacobi ? "jacobi" : "gs") << "," << i << "," << fmt(t.absolute[i]) << ","
              << fmt(t.relative[i]) << "\n";
      }
    } else {
      std::vector<double> dts = o.dts;
      if (dts.empty()) dts = {spec.solver.dt};
      csv << "dt,steps,total_iterations,unconverged_steps,runtime_s\n";
      for (const auto& row : timestep_study(spec, dts, o.duration, o.tolerance, o.max_iterations, o.threads))
        csv << fmt(row.dt) << "," << row.steps << "," << row.total_iterations << "," << row.unconverged_steps << ","
            << fmt(row.runtime_s) << "\n";
    }
  } catch (const SimulationError& e) {
    std::cerr << "simulation aborted: " << e.what() << "\n";
    return kExitRuntime;
  }
  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream out(o.out);
    if (!out) {
      std::cerr << "error: cannot write " << o.out << "\n";
      return kExitRuntime;
    }
    out << csv.str();
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"XPBI meshless inelastic simulation"};
  app.require_subcommand(1);

  RunOptions run;
  run.threads = default_threads();
  auto* run_cmd = app.add_subcommand("run", "Simulate a scene and write frames, metrics and diagnostics");
  run_cmd->add_option("--scene", run.scene, "Scene file (JSON)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--out", run.out, "Root output directory")->capture_default_str();
  run_cmd->add_option("--dt", run.dt, "Override the solver timestep (s)");
  run_cmd->add_option("--iters", run.iterations, "Override the iteration count");
  run_cmd->add_option("--backend", run.backend, "Solver backend")->check(CLI::IsMember({"gs", "jacobi"}));
  run_cmd->add_option("--threads", run.threads, "Worker threads (default: XPBI_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
  run_cmd->add_option("--seed", run.seed, "Override the sampling seed");
  run_cmd->add_option("--frames", run.frames, "Number of frames to write")->check(CLI::PositiveNumber);
  run_cmd->add_flag("--csv-frames", run.csv_frames, "Write CSV frames instead of binary");
  run_cmd->add_option("--residual-threshold", run.residual_threshold,
                      "Relative residual above which a frame is flagged")
      ->capture_default_str();

  int verify_threads = default_threads();
  std::string verify_dir;
  int verify_steps = 5;
  std::string verify_report;
  auto* verify_cmd = app.add_subcommand("verify", "Run every oracle and the bundled-scene invariant suite");
  verify_cmd->add_option("--threads", verify_threads, "Worker threads")->check(CLI::PositiveNumber);
  verify_cmd->add_option("--scenes", verify_dir, "Scene directory (default: bundled scenes)");
  verify_cmd->add_option("--steps", verify_steps, "Steps per scene run")->check(CLI::PositiveNumber);
  verify_cmd->add_option("--report", verify_report, "Write the check table as CSV");

  std::vector<std::string> metric_inputs;
  std::string metric_scene;
  std::optional<double> metric_radius;
  int metric_dim = 3;
  std::string metric_out;
  auto* metrics_cmd = app.add_subcommand("metrics", "Recompute distribution metrics from saved frames");
  metrics_cmd->add_option("inputs", metric_inputs, "Frame files or run directories")->required();
  metrics_cmd->add_option("--scene", metric_scene, "Scene file providing radius and dimension");
  metrics_cmd->add_option("--radius", metric_radius, "Particle radius r");
  metrics_cmd->add_option("--dimension", metric_dim, "2 or 3")->check(CLI::IsMember({2, 3}));
  metrics_cmd->add_option("--out", metric_out, "Output CSV (default: stdout)");

  StudyOptions study;
  study.threads = default_threads();
  auto* study_cmd = app.add_subcommand("study", "Residual-per-iteration or timestep sweeps");
  study_cmd->add_option("--scene", study.scene, "Scene file")->required()->check(CLI::ExistingFile);
  study_cmd->add_option("--kind", study.kind, "convergence or dt")->check(CLI::IsMember({"convergence", "dt"}));
  study_cmd->add_option("--warmup", study.warmup, "Steps before the measured step (convergence)");
  study_cmd->add_option("--iters", study.iterations, "Iterations of the measured step (convergence)");
  study_cmd->add_option("--dts", study.dts, "Timesteps to sweep (dt)")->delimiter(',');
  study_cmd->add_option("--tolerance", study.tolerance, "Absolute residual threshold (dt)");
  study_cmd->add_option("--duration", study.duration, "Simulated seconds per timestep (dt)");
  study_cmd->add_option("--max-iters", study.max_iterations, "Iteration cap per step (dt)");
  study_cmd->add_option("--threads", study.threads, "Worker threads")->check(CLI::PositiveNumber);
  study_cmd->add_option("--out", study.out, "Output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (*run_cmd) return cmd_run(run);
  if (*verify_cmd) return cmd_verify(verify_threads, verify_dir, verify_steps, verify_report);
  if (*metrics_cmd) return cmd_metrics(metric_inputs, metric_scene, metric_radius, metric_dim, metric_out);
  if (*study_cmd) return cmd_study(study);
  return kExitUsage;
}
