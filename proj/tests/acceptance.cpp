// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ldl/ldl.hpp"

using namespace ldl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ScoreDistribution random_distribution(std::mt19937_64& rng, std::size_t c, bool allow_zeros) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> d(c);
  double s = 0;
  for (auto& v : d) {
    v = u(rng);
    if (allow_zeros && u(rng) < 0.3) v = 0;
    s += v;
  }
  if (s == 0) d[0] = s = 1;
  for (auto& v : d) v /= s;
  return ScoreDistribution::renormalized(d, 1e-9);
}

SynthConfig end_to_end_synth(std::uint64_t seed) {
  SynthConfig sc;
  sc.n = 2000;
  sc.raters = 70;
  sc.noise_sd = 0.4;
  sc.bimodal_fraction = 0.1;
  sc.image_size = 32;
  sc.seed = seed;
  return sc;
}

Dataset end_to_end_data(std::uint64_t seed) { return split_fraction(synth_dataset(end_to_end_synth(seed)), 0.8, seed); }

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

// Images are stored as 8-bit PPM, so a round trip is exact at byte level.
long to_byte(float v) { return std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0); }

}  // namespace

int main() {
  const auto start = Clock::now();

  report(1, "gradient suite, 50 seeds", [] {
    const auto t0 = Clock::now();
    std::size_t cases = 0, bad = 0;
    double worst_op = 0, worst_net = 0;
    std::string first_bad;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
      for (const auto& c : run_gradient_suite(seed)) {
        ++cases;
        double& worst = c.tolerance == kNetworkGradTolerance ? worst_net : worst_op;
        worst = std::max(worst, c.report.max_rel_error);
        if (!c.passed()) {
          if (bad++ == 0) first_bad = fmt("seed %llu %s", static_cast<unsigned long long>(seed), c.name.c_str());
        }
      }
    }
    const double t = seconds_since(t0);
    const bool ok = bad == 0 && worst_op < kOpGradTolerance && worst_net < kNetworkGradTolerance && t < 120.0;
    return Outcome{ok, fmt("%zu checks, %zu failed%s%s, max rel ops %.2e network %.2e, %.1fs", cases, bad,
                           bad ? ", first " : "", first_bad.c_str(), worst_op, worst_net, t)};
  });

  report(2, "analytic KL logit gradient vs autodiff, 100 cases", [] {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> n(0.0, 2.0);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto d = random_distribution(rng, 5, trial % 2 == 0);
      std::vector<double> z(5);
      for (auto& v : z) v = n(rng);
      ParameterStore<double> store;
      store.add("z", Tensor<double>({1, 5}, z));
      Graph<double> g(&store);
      g.backward(ad::kl_loss(g, ad::softmax(g, g.param("z")), Tensor<double>({1, 5}, d.degrees())));
      const auto analytic = kl_logit_gradient(d, z);
      for (std::size_t j = 0; j < 5; ++j) worst = std::max(worst, std::abs(analytic[j] - store.at("z").grad[j]));
    }
    return Outcome{worst < 1e-8, fmt("max |delta| %.3e", worst)};
  });

  report(3, "loss unit values", [] {
    auto pm = [](std::size_t j) { return ScoreDistribution::point_mass(5, j); };
    const double e = euclidean_loss(pm(1), pm(0), false).value;
    const double k2 = kl_loss(ScoreDistribution({0.5, 0.5, 0, 0, 0}), ScoreDistribution({0.25, 0.25, 0.25, 0.25, 0})).value;
    const double k5 = kl_loss(pm(0), ScoreDistribution({0.2, 0.2, 0.2, 0.2, 0.2})).value;
    auto six = [](double a, double b) { return std::round(a * 1e6) == std::round(b * 1e6); };
    const bool ok = six(e, std::sqrt(2.0)) && six(k2, std::log(2.0)) && six(k5, std::log(5.0));
    return Outcome{ok, fmt("euclidean %.6f, kl %.6f and %.6f", e, k2, k5)};
  });

  report(4, "distribution invariants, 10k random rating sets", [] {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(1.0, 5.0);
    std::uniform_int_distribution<int> len(1, 100);
    const ScoreScale scale;
    std::size_t violations = 0;
    double worst_sum = 0;
    for (int trial = 0; trial < 10000; ++trial) {
      std::vector<double> r(len(rng));
      for (auto& v : r) v = trial % 2 ? u(rng) : std::round(u(rng));
      const auto d = distribution_from_ratings(r, scale);
      double s = 0;
      for (double v : d.degrees()) {
        if (v < 0) ++violations;
        s += v;
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      const double m = weighted_mean(d, scale);
      if (!(m >= 1.0 && m <= 5.0)) ++violations;
    }
    return Outcome{violations == 0 && worst_sum <= 1e-6,
                   fmt("%zu violations, max |sum-1| %.2e", violations, worst_sum)};
  });

  std::vector<double> ldl_kl;
  report(5, "synthetic end-to-end, 5 seeds", [&] {
    double latent_pc = 1.0;
    for (auto seed : kSeeds) {
      const auto ds = synth_dataset(end_to_end_synth(seed));
      std::vector<double> lat, mean;
      for (const auto& s : ds.samples) {
        lat.push_back(*s.latent);
        mean.push_back(s.mean_score);
      }
      latent_pc = std::min(latent_pc, pearson(lat, mean));
    }
    std::printf("  generator latent-vs-mean PC (min over seeds) %.4f, threshold 0.95\n", latent_pc);
    const auto t0 = Clock::now();
    std::size_t good = 0;
    std::string pcs;
    for (auto seed : kSeeds) {
      const auto ds = end_to_end_data(seed);
      auto cfg = TrainConfig::desk_default();
      cfg.seed = seed;
      cfg.loss = LossKind::euclidean;
      const auto result = train(ds, NetworkSpec::desk_default(), cfg);
      const auto ev = evaluate(result.checkpoint, ds, ds.test, cfg.loss);
      const double pc = ev.pc.value_or(std::nan(""));
      if (pc >= 0.85) ++good;
      ldl_kl.push_back(ev.mean_kl);
      pcs += fmt("%s%.3f", pcs.empty() ? "" : " ", pc);
      std::printf("  seed %llu: test PC %.4f, mean KL %.4f\n", static_cast<unsigned long long>(seed), pc, ev.mean_kl);
      std::fflush(stdout);
    }
    const double t = seconds_since(t0);
    return Outcome{latent_pc > 0.95 && good >= 4 && t <= 600.0,
                   fmt("PC [%s], %zu/5 >= 0.85, %.0fs", pcs.c_str(), good, t)};
  });

  report(6, "LDL vs mean-score regression, test KL", [&] {
    if (ldl_kl.size() != 5) return Outcome{false, "criterion 5 runs did not complete"};
    std::vector<double> base_kl;
    for (auto seed : kSeeds) {
      const auto ds = end_to_end_data(seed);
      auto cfg = TrainConfig::desk_default();
      cfg.seed = seed;
      cfg.loss = LossKind::euclidean_sq;
      auto spec = NetworkSpec::desk_default();
      spec.head = HeadKind::scalar;
      const auto result = train(ds, spec, cfg);
      base_kl.push_back(evaluate(result.checkpoint, ds, ds.test, cfg.loss).mean_kl);
      std::printf("  seed %llu: baseline mean KL %.4f\n", static_cast<unsigned long long>(seed), base_kl.back());
      std::fflush(stdout);
    }
    const double a = median(ldl_kl), b = median(base_kl);
    return Outcome{a < b, fmt("median KL LDL %.4f vs regression %.4f", a, b)};
  });

  report(7, "residual vs plain at {2,2,2,2}, final train loss", [] {
    std::vector<double> res, plain;
    for (auto seed : kSeeds) {
      const auto ds = end_to_end_data(seed);
      auto cfg = TrainConfig::desk_default();
      cfg.seed = seed;
      for (bool skip : {true, false}) {
        auto spec = NetworkSpec::desk_default();
        spec.block_counts = {2, 2, 2, 2};
        spec.skip_connections = skip;
        const auto result = train(ds, spec, cfg);
        (skip ? res : plain).push_back(result.log.records.back().train_loss);
      }
      std::printf("  seed %llu: residual %.4f plain %.4f\n", static_cast<unsigned long long>(seed), res.back(),
                  plain.back());
      std::fflush(stdout);
    }
    const double a = median(res), b = median(plain);
    return Outcome{a < b, fmt("median final train loss residual %.4f vs plain %.4f", a, b)};
  });

  report(8, "determinism and round-trips", [] {
    SynthConfig sc;
    sc.n = 200;
    sc.seed = 8;
    const Dataset ds = split_fraction(synth_dataset(sc), 0.8, 8);
    auto cfg = TrainConfig::desk_default();
    cfg.seed = 8;
    cfg.max_iter = 30;
    cfg.eval_every = 10;
    cfg.batch_size = 16;
    const auto r1 = train(ds, NetworkSpec::desk_default(), cfg);
    const auto r2 = train(ds, NetworkSpec::desk_default(), cfg);
    const bool same_log = r1.log.to_csv() == r2.log.to_csv();

    const auto bytes = encode_checkpoint(r1.checkpoint);
    const auto back = decode_checkpoint(bytes);
    const bool ckpt_ok = back.tensors == r1.checkpoint.tensors && encode_checkpoint(back) == bytes &&
                         back.spec.encode() == r1.checkpoint.spec.encode() && back.iteration == r1.checkpoint.iteration;

    const fs::path dir = fs::temp_directory_path() / "ldl_acceptance_roundtrip";
    fs::remove_all(dir);
    write_csv(ds, dir / "index.csv");
    const Dataset loaded = load_csv(dir / "index.csv");
    double worst = 0;
    bool images_ok = loaded.size() == ds.size();
    for (std::size_t i = 0; images_ok && i < ds.size(); ++i) {
      const auto& a = ds.samples[i].distribution.degrees();
      const auto& b = loaded.samples[i].distribution.degrees();
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
      const auto& ia = ds.samples[i].image.data();
      const auto& ib = loaded.samples[i].image.data();
      for (std::size_t k = 0; k < ia.size(); ++k) {
        if (to_byte(ia[k]) != to_byte(ib[k])) images_ok = false;
      }
    }
    fs::remove_all(dir);
    const bool index_ok = images_ok && worst <= 1e-6;
    return Outcome{same_log && ckpt_ok && index_ok,
                   fmt("metrics CSV %s, checkpoint %s, index %s (max degree diff %.1e)", same_log ? "identical" : "differs",
                       ckpt_ok ? "bit-exact" : "differs", index_ok ? "exact" : "differs", worst)};
  });

  report(9, "protocol arithmetic", [] {
    SynthConfig sc;
    sc.n = 500;
    sc.image_size = 16;
    const Dataset ds = split(synth_dataset(sc), 400, 100, 9);
    const Dataset big = expand(ds, 20, 9);
    const bool ok = ds.train.size() == 400 && ds.test.size() == 100 && big.train.size() == 8000 && big.test.size() == 100;
    return Outcome{ok, fmt("split %zu/%zu, expanded train %zu, test %zu", ds.train.size(), ds.test.size(),
                           big.train.size(), big.test.size())};
  });

  std::printf("%d failed, total %.0fs\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
