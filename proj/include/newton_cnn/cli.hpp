#pragma once

#include <newton_cnn/checkpoint.hpp>
#include <newton_cnn/diagnostics.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace newton_cnn {

// Exit codes: 0 success, 1 numerical failure during training (a usable
// checkpoint from the last finished iteration stays on disk), 2 bad usage,
// unreadable files, or malformed inputs.

namespace cli_detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// A dataset argument is either "images.idx,labels.idx" or a single .csv
// with rows "label,pixel,pixel,...".
inline Dataset load_data_arg(const std::string& arg, const ModelConfig& cfg) {
  const auto comma = arg.find(',');
  if (comma != std::string::npos) {
    Dataset ds = load_idx(arg.substr(0, comma), arg.substr(comma + 1));
    require(ds.a == cfg.input_height && ds.b == cfg.input_width &&
                ds.d == cfg.input_channels,
            "data geometry " + std::to_string(ds.a) + "x" + std::to_string(ds.b) + "x" +
                std::to_string(ds.d) + " does not match the model input");
    return ds;
  }
  if (arg.size() >= 4 && arg.substr(arg.size() - 4) == ".csv")
    return load_csv(arg, cfg.input_height, cfg.input_width, cfg.input_channels);
  fail("cannot tell the data format of '" + arg +
       "': pass images.idx,labels.idx or a .csv file");
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open model config: " + path);
  return parse_model_config(in, path);
}

struct TrainOptions {
  std::string config_path, train_arg, test_arg, out_dir = "run", resume_path;
  SolverConfig solver;
  double C_flag = -1.0;  // unset: default to 0.01 * l
  bool reproducible = false;
};

inline int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
  ModelConfig config = load_config(opt.config_path);
  Network net = make_network(config);

  Dataset train = load_data_arg(opt.train_arg, config);
  Dataset test;
  const bool have_test = !opt.test_arg.empty();
  if (have_test) test = load_data_arg(opt.test_arg, config);
  preprocess(train, have_test ? &test : nullptr);
  one_hot(train, net.num_classes());
  if (have_test) one_hot(test, net.num_classes());

  SolverConfig cfg = opt.solver;
  cfg.C = opt.C_flag > 0.0 ? opt.C_flag : 0.01 * double(train.size());

  const Index subset =
      std::max<Index>(1, static_cast<Index>(std::ceil(cfg.sample_rate * double(train.size()))));
  out << "model: " << opt.config_path << ", " << net.layer_count() << " layers, "
      << net.params() << " parameters\n"
      << "train: " << train.size() << " instances (" << train.a << "x" << train.b << "x"
      << train.d << ")";
  if (have_test) out << ", test: " << test.size() << " instances";
  out << "\n"
      << "iters " << cfg.iters << ", sample rate " << cfg.sample_rate << ", C " << cfg.C
      << ", cg_max " << cfg.cg_max << ", cg_tol " << cfg.cg_tol << ", seed " << cfg.seed
      << (cfg.rho_with_lambda ? ", damped model ratio" : "") << "\n"
      << format_resources(estimate_resources(net, train.size(), subset), train.size(),
                          subset);
  out.flush();

  std::filesystem::create_directories(opt.out_dir);
  const std::string log_path = opt.out_dir + "/log.csv";
  const std::string ckpt_path = opt.out_dir + "/model.ckpt";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) fail("cannot open training log for writing: " + log_path);
  log << "iter,f,train_acc,test_acc,lambda,cg_iters,alpha,seconds\n";
  log.flush();

  ResumeState resume;
  const bool resuming = !opt.resume_path.empty();
  if (resuming) {
    resume = load_checkpoint(opt.resume_path);
    require(resume.theta.size() == net.params(),
            "checkpoint parameter count does not match the model");
    out << "resuming after iteration " << resume.iteration << " from " << opt.resume_path
        << "\n";
  }

  TrainHooks hooks;
  hooks.on_iteration = [&](const NewtonState& st, const Vector& theta,
                           const std::string& rng_state) {
    const double secs = opt.reproducible ? 0.0 : st.seconds;
    log << st.iter << ',' << fmt17(st.f) << ',' << fmt17(st.train_acc) << ','
        << fmt17(st.test_acc) << ',' << fmt17(st.lambda) << ',' << st.cg_iters << ','
        << fmt17(st.alpha) << ',' << fmt17(secs) << "\n";
    log.flush();
    ResumeState ckpt;
    ckpt.theta = theta;
    ckpt.lambda = lm_update(st.lambda, st.rho, cfg);
    ckpt.iteration = st.iter;
    ckpt.rng_state = rng_state;
    save_checkpoint(ckpt_path, ckpt);
    out << "iter " << st.iter << "  f " << st.f << "  train " << st.train_acc;
    if (std::isfinite(st.test_acc)) out << "  test " << st.test_acc;
    out << "  lambda " << st.lambda << "  cg " << st.cg_iters << "  alpha " << st.alpha
        << "  (" << secs << "s)\n";
    out.flush();
  };

  try {
    TrainResult res = newton_train(net, train, have_test ? &test : nullptr, cfg, hooks,
                                   resuming ? &resume : nullptr);
    if (!res.history.empty()) {
      const NewtonState& last = res.history.back();
      out << "done: f " << last.f << ", train accuracy " << last.train_acc;
      if (std::isfinite(last.test_acc)) out << ", test accuracy " << last.test_acc;
      out << "\n";
    }
    out << "log: " << log_path << "\nmodel: " << ckpt_path << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "training aborted: " << e.what() << "\n";
    if (std::filesystem::exists(ckpt_path))
      err << "last checkpoint: " << ckpt_path << "\n";
    return 1;
  }
}

inline int cmd_check(const std::string& config_path, std::uint64_t seed, std::ostream& out) {
  ModelConfig config =
      config_path.empty() ? default_check_config() : load_config(config_path);
  CheckReport rep = run_checks(config, seed);
  print_report(out, rep);
  return 0;
}

inline int cmd_eval(const std::string& config_path, const std::string& model_path,
                    const std::string& data_arg, const std::string& train_arg,
                    std::ostream& out) {
  ModelConfig config = load_config(config_path);
  Network net = make_network(config);
  ResumeState st = load_checkpoint(model_path);
  require(st.theta.size() == net.params(),
          "checkpoint parameter count does not match the model");

  Dataset data = load_data_arg(data_arg, config);
  if (!train_arg.empty()) {
    // Reproduce the training normalization: scale each image, then shift by
    // the training set's mean image.
    Dataset train = load_data_arg(train_arg, config);
    preprocess(train, &data);
  } else {
    preprocess(data, nullptr);
  }
  one_hot(data, net.num_classes());

  const Matrix outputs = network_outputs(net, st.theta, data.images);
  double data_loss = 0.0;
  for (Index i = 0; i < data.size(); ++i)
    data_loss += (outputs.col(i) - data.labels.col(i)).squaredNorm();
  data_loss /= double(data.size());
  out << "instances " << data.size() << "\nmean loss " << data_loss << "\naccuracy "
      << accuracy(outputs, data.raw_labels) << "\n";
  return 0;
}

}  // namespace cli_detail

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  if (const char* threads = std::getenv("NEWTON_CNN_THREADS"))
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));
  else
    Eigen::setNbThreads(1);  // deterministic by default

  CLI::App app{"Subsampled-curvature Newton trainer for small convolutional networks"};
  app.require_subcommand(1);

  cli_detail::TrainOptions topt;
  std::uint64_t check_seed = 0;
  std::string check_config, eval_model, eval_data, eval_train;

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", topt.config_path, "model description file")->required();
  train->add_option("--train-data", topt.train_arg,
                    "training data: images.idx,labels.idx or data.csv")
      ->required();
  train->add_option("--test-data", topt.test_arg, "held-out data in the same format");
  train->add_option("--iters", topt.solver.iters, "outer iterations");
  train->add_option("--sample-rate", topt.solver.sample_rate,
                    "curvature subset fraction of the training set");
  train->add_option("--cg-max", topt.solver.cg_max, "inner iteration cap");
  train->add_option("--cg-tol", topt.solver.cg_tol, "relative residual stop");
  train->add_option("--seed", topt.solver.seed, "seed for init and sampling");
  train->add_option("--C", topt.C_flag, "regularization constant (default 0.01 * l)");
  train->add_option("--out", topt.out_dir, "output directory (log.csv, model.ckpt)");
  train->add_option("--resume", topt.resume_path, "continue from a checkpoint");
  train->add_flag("--reproducible", topt.reproducible,
                  "log 0 for the seconds column so reruns are byte-identical");
  train->add_flag("--rho-with-lambda", topt.solver.rho_with_lambda,
                  "include the damping term in the step-quality model");

  CLI::App* check = app.add_subcommand("check", "run the numerical self-checks");
  check->add_option("--config", check_config, "model description (default: built-in)");
  check->add_option("--seed", check_seed, "seed for the random probes");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", topt.config_path, "model description file")->required();
  eval->add_option("--model", eval_model, "checkpoint to evaluate")->required();
  eval->add_option("--test-data", eval_data, "data to evaluate on")->required();
  eval->add_option("--train-data", eval_train,
                   "training data, to reproduce its normalization");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cli_detail::cmd_train(topt, out, err);
    if (check->parsed()) return cli_detail::cmd_check(check_config, check_seed, out);
    if (eval->parsed())
      return cli_detail::cmd_eval(topt.config_path, eval_model, eval_data, eval_train, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

inline int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(std::move(args));
}

}  // namespace newton_cnn
