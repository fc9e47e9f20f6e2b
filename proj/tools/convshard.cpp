#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "convshard/cli.hpp"
#include "convshard/errors.hpp"
#include "convshard/transport.hpp"

namespace {

struct ValueFlag {
  const char* flag;
  const char* key;
  const char* help;
};

const std::vector<ValueFlag> kValueFlags{
    {"--preset", "preset", "50:500, 150:800, 300:1000 or 500:1500"},
    {"--batch", "batch", "64, 128, 256, 512 or 1024"},
    {"--epochs", "epochs", "training epochs"},
    {"--lr", "lr", "SGD learning rate"},
    {"--seed", "seed", "seed for parameters, synthetic data and simulated devices"},
    {"--port", "port", "worker listen port and default worker port for the master"},
    {"--workers", "workers", "worker addresses host[:port],... in device order"},
    {"--master", "master", "worker side: only accept this master host"},
    {"--data", "data", "CIFAR-10 binary directory or file"},
    {"--samples", "samples", "training samples to use (0 = all)"},
    {"--test-samples", "test_samples", "held-out samples to evaluate after training"},
    {"--max-batches", "max_batches", "cap on batches per epoch (0 = all)"},
    {"--out", "out", "metrics CSV (simulate: sweep CSV)"},
    {"--checkpoint", "checkpoint", "checkpoint path (default: <out>.ckpt)"},
    {"--resume", "resume", "continue from a checkpoint"},
    {"--run-id", "run_id", "run_id column of the metrics CSV"},
    {"--timeout", "timeout", "seconds to wait on a peer"},
    {"--connect-timeout", "connect_timeout", "seconds to keep retrying a worker"},
    {"--device-class", "device_class", "cpu-low-mid, cpu-high, gpu-low-mid, gpu-high or mobile-gpu"},
    {"--nodes", "nodes", "largest simulated cluster"},
    {"--bandwidth", "bandwidth", "bits per second, comma separated; 'inf' allowed"},
    {"--baseline-conv", "baseline_conv", "single-device conv seconds per batch"},
    {"--baseline-comp", "baseline_comp", "single-device non-conv seconds per batch"},
    {"--latency", "latency", "seconds per simulated message"},
};

struct BoolFlag {
  const char* flag;
  const char* key;
  const char* value;
  const char* help;
};

const std::vector<BoolFlag> kBoolFlags{
    {"--synthetic", "synthetic", "true", "seeded random data instead of CIFAR-10"},
    {"--no-distribute-backward", "distribute_backward", "false", "distribute forward convolutions only"},
    {"--no-checkpoint", "checkpointing", "false", "do not write checkpoints"},
    {"--measure-baseline", "measure_baseline", "true", "simulate: time this machine for the baseline"},
    {"--equal-devices", "equal_devices", "true", "simulate: identical devices instead of a drawn class"},
};

void log_line(const std::string& line) { std::cerr << "convshard: " << line << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel-partitioned distributed CNN training"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string configPath;
  app.add_option("--config", configPath, "key = value run configuration");
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> valueOpts;
  for (const auto& f : kValueFlags) valueOpts[f.key] = app.add_option(f.flag, values[f.key], f.help);
  std::vector<std::pair<const BoolFlag*, CLI::Option*>> boolOpts;
  for (const auto& f : kBoolFlags) boolOpts.emplace_back(&f, app.add_flag(f.flag, f.help));

  using Command = int (*)(const convshard::RunConfig&, const convshard::CommandContext&);
  const std::vector<std::tuple<const char*, const char*, Command>> commands{
      {"bench", "time the first conv layer on this device", convshard::cmd_bench},
      {"master", "train with the listed workers", convshard::cmd_master},
      {"worker", "serve convolutions for one master", convshard::cmd_worker},
      {"train-local", "single-process training (the speedup reference)", convshard::cmd_train_local},
      {"simulate", "speedup model sweeps as CSV", convshard::cmd_simulate},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help, fn] : commands) subs.push_back(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  return convshard::run_guarded(
      [&]() -> int {
        convshard::RunConfig cfg;
        cfg.port = convshard::default_port();
        if (!configPath.empty()) cfg = convshard::load_run_config(configPath, cfg);
        for (const auto& [key, opt] : valueOpts)
          if (opt->count()) cfg.set(key, values[key]);
        for (const auto& [f, opt] : boolOpts)
          if (opt->count()) cfg.set(f->key, f->value);
        const convshard::CommandContext ctx{&std::cout, log_line};
        for (std::size_t i = 0; i < subs.size(); ++i)
          if (subs[i]->parsed()) return std::get<2>(commands[i])(cfg, ctx);
        throw convshard::ConfigError("no command given");
      },
      log_line);
}
