#include "idforget/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "idforget/checkpoint.hpp"
#include "idforget/config.hpp"
#include "idforget/deident.hpp"
#include "idforget/engine.hpp"
#include "idforget/errors.hpp"
#include "idforget/metrics.hpp"
#include "idforget/world.hpp"

namespace idf {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Wall-clock lives in its own file so that manifests stay byte-stable.
void write_timing(const fs::path& dir, double seconds) {
  write_text_file(dir / "timing.txt", "wall_seconds=" + format_double(seconds) + "\n");
}

std::string csv_trace(const std::string& header, const std::vector<double>& values) {
  std::string out = header + "\n";
  for (std::size_t i = 0; i < values.size(); ++i) out += std::to_string(i) + "," + format_double(values[i]) + "\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> prefixed(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : cfg.entries()) out.emplace_back("run." + k, v);
  return out;
}

void require_distinct(const fs::path& out, const fs::path& from) {
  if (fs::exists(out) && fs::exists(from) && fs::equivalent(out, from)) {
    throw ConfigError("--out must differ from --from so that inputs are never overwritten");
  }
}

struct Pretrained {
  World world;
  PretrainedModels models;
};

Pretrained load_inputs(const fs::path& from, const RunConfig& cfg) {
  Pretrained p{load_world(from / "world.txt"), {}};
  if (!(p.world.spec == cfg.world)) {
    throw ConfigError("[world] settings and seed do not match the world stored in " + from.string());
  }
  p.models = load_pretrained(from, p.world);
  return p;
}

std::optional<DeIdentNet> maybe_train_deident(const World& world, const PretrainedModels& models,
                                              std::span<const int> ids, const RunConfig& cfg, const fs::path& dir) {
  if (!uses_deident(cfg.unlearn.method) || ids.empty()) return std::nullopt;
  DeIdentTrainResult tr = train_deident(world, models, ids, cfg.deident);
  save_checkpoint(dir / "deident.ckpt", Role::deident, tr.net.params);
  write_text_file(dir / "deident_log.csv", csv_trace("epoch,loss", tr.epoch_loss));
  return std::move(tr.net);
}

std::string report_csv(const std::string& method, std::size_t k, double d, std::uint64_t seed, const EvalReport& r) {
  return std::string(kReportCsvHeader) + "\n" + report_csv_row(method, k, d, seed, r) + "\n";
}

std::string closeness_csv(const World& world, const PretrainedModels& models, const ParamSet& after,
                          const RunConfig& cfg) {
  const LatentFrame frame = latent_frame(world, models);
  std::vector<double> deltas;
  for (double d : cfg.eval.sweep_deltas) deltas.push_back(d * frame.radius);
  std::string out = "id,delta,id_similarity\n";
  for (std::size_t i = 0; i < world.forget_ids.size(); ++i) {
    const auto rows = distance_sweep(world, models, after, models.generator, frame.forget.row(i), deltas,
                                     cfg.eval.sweep_count, cfg.seed);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      out += std::to_string(world.forget_ids[i]) + "," + format_sig6(cfg.eval.sweep_deltas[j]) + "," +
             format_sig6(rows[j].second) + "\n";
    }
  }
  return out;
}

// --- commands ----------------------------------------------------------------

int cmd_pretrain(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  const auto start = Clock::now();
  const World world = synth_world(cfg.world);
  const PretrainResult result = pretrain(world, cfg.pretrain);
  save_world(out_dir / "world.txt", world);
  save_pretrained(out_dir, result.models);

  std::ostringstream man;
  man << "command=pretrain\n";
  for (const auto& [k, v] : cfg.entries()) man << "config." << k << '=' << v << '\n';
  man << "world_digest=" << sha256_hex(world_text(world)) << '\n'
      << "generator_digest=" << params_digest(result.models.generator) << '\n'
      << "encoder_digest=" << params_digest(result.models.encoder) << '\n'
      << "embedder_digest=" << params_digest(result.models.embedder) << '\n'
      << "perceptual_digest=" << params_digest(result.models.perceptual) << '\n'
      << "reconstruction_mse=" << format_double(result.report.reconstruction_mse) << '\n'
      << "id_similarity=" << format_double(result.report.id_similarity) << '\n'
      << "inversion_error=" << format_double(result.report.inversion_error) << '\n'
      << "---\n"
      << csv_trace("epoch,loss", result.report.loss_trace);
  write_text_file(out_dir / "manifest.txt", man.str());
  write_timing(out_dir, seconds_since(start));
  out << "pretrained: reconstruction_mse=" << format_sig6(result.report.reconstruction_mse)
      << " id_similarity=" << format_sig6(result.report.id_similarity) << '\n';
  return kExitOk;
}

int cmd_unlearn(RunConfig cfg, const fs::path& from, const std::vector<int>& ids, const fs::path& out_dir,
                std::ostream& out) {
  const auto start = Clock::now();
  if (ids.empty()) throw ConfigError("--ids must name at least one identity");
  const Pretrained in = load_inputs(from, cfg);
  const World world = in.world.with_forget_set(ids);
  cfg.unlearn.echo = prefixed(cfg);
  const std::optional<DeIdentNet> net = maybe_train_deident(in.world, in.models, ids, cfg, out_dir);
  const UnlearnRun run = unlearn(world, in.models, net ? &*net : nullptr, cfg.unlearn);
  const EvalReport report = evaluate(world, in.models.generator, run.generator, in.models, ids, world.retain_ids);

  save_checkpoint(out_dir / "generator.ckpt", Role::generator, run.generator);
  write_text_file(out_dir / "manifest.txt", run.manifest.text());
  write_text_file(out_dir / "report.csv",
                  report_csv(method_name(cfg.unlearn.method), ids.size(), cfg.unlearn.d, cfg.seed, report));
  write_text_file(out_dir / "distance_sweep.csv", closeness_csv(world, in.models, run.generator, cfg));
  write_timing(out_dir, seconds_since(start));
  out << "unlearned " << ids.size() << " identities: id_forget=" << format_sig6(report.forget.id)
      << " id_retain=" << format_sig6(report.retain.id) << '\n';
  return kExitOk;
}

int cmd_sequential(RunConfig cfg, const fs::path& from, const fs::path& plan_path, const fs::path& out_dir,
                   std::ostream& out) {
  const auto start = Clock::now();
  if (!fs::exists(plan_path)) throw ConfigError("plan file not found: " + plan_path.string());
  const StagePlan plan{parse_stage_plan(read_text_file(plan_path))};
  const Pretrained in = load_inputs(from, cfg);
  plan.validate(in.world);
  cfg.unlearn.echo = prefixed(cfg);

  std::deque<DeIdentNet> nets;  // stable addresses for the provider
  const NetProvider provider = [&](std::size_t stage, std::span<const int> ids) -> const DeIdentNet* {
    auto net = maybe_train_deident(in.world, in.models, ids, cfg, out_dir / ("stage_" + std::to_string(stage)));
    if (!net) return nullptr;
    nets.push_back(std::move(*net));
    return &nets.back();
  };
  const std::vector<UnlearnRun> runs = sequential_unlearn(in.world, in.models, provider, plan, cfg.unlearn);

  const std::vector<int> retain = plan.retained(in.world);
  std::vector<int> forgotten;
  std::string csv = "stage," + std::string(kReportCsvHeader) + "\n";
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const fs::path dir = out_dir / ("stage_" + std::to_string(s + 1));
    save_checkpoint(dir / "generator.ckpt", Role::generator, runs[s].generator);
    write_text_file(dir / "manifest.txt", runs[s].manifest.text());
    forgotten.insert(forgotten.end(), plan.stages[s].begin(), plan.stages[s].end());
    const EvalReport report = evaluate(in.world, in.models.generator, runs[s].generator, in.models, forgotten, retain);
    csv += std::to_string(s + 1) + "," +
           report_csv_row(method_name(cfg.unlearn.method), forgotten.size(), cfg.unlearn.d, cfg.seed, report) + "\n";
    out << "stage " << s + 1 << ": id_retain=" << format_sig6(report.retain.id) << '\n';
  }
  write_text_file(out_dir / "sequential.csv", csv);
  write_timing(out_dir, seconds_since(start));
  return kExitOk;
}

int cmd_sweep(const RunConfig& cfg, const fs::path& from, const std::string& param, const std::vector<double>& values,
              const std::vector<int>& ids, bool plot, const fs::path& out_dir, std::ostream& out) {
  const auto start = Clock::now();
  if (param != "d" && param != "lambda_ewc") throw ConfigError("--param must be d or lambda_ewc");
  if (values.empty()) throw ConfigError("--values: empty value list");
  if (ids.empty()) throw ConfigError("--ids must name at least one identity");
  const Pretrained in = load_inputs(from, cfg);
  const World world = in.world.with_forget_set(ids);

  std::string csv = "param,value," + std::string(kReportCsvHeader) + "\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    RunConfig point = cfg;
    if (param == "d") {
      point.unlearn.d = point.deident.d = values[i];
    } else {
      point.unlearn.lambda_ewc = values[i];
    }
    point.finalize();
    point.unlearn.echo = prefixed(point);
    const fs::path dir = out_dir / ("point_" + std::to_string(i + 1));
    const std::optional<DeIdentNet> net = maybe_train_deident(in.world, in.models, ids, point, dir);
    const UnlearnRun run = unlearn(world, in.models, net ? &*net : nullptr, point.unlearn);
    const EvalReport report = evaluate(world, in.models.generator, run.generator, in.models, ids, world.retain_ids);
    save_checkpoint(dir / "generator.ckpt", Role::generator, run.generator);
    write_text_file(dir / "manifest.txt", run.manifest.text());
    csv += param + "," + format_sig6(values[i]) + "," +
           report_csv_row(method_name(point.unlearn.method), ids.size(), point.unlearn.d, point.seed, report) + "\n";
    out << param << '=' << format_sig6(values[i]) << ": id_forget=" << format_sig6(report.forget.id)
        << " id_retain=" << format_sig6(report.retain.id) << '\n';
  }
  write_text_file(out_dir / "sweep.csv", csv);
  if (plot) write_text_file(out_dir / "sweep.svg", sweep_plot_from_csv(csv));
  write_timing(out_dir, seconds_since(start));
  return kExitOk;
}

int cmd_plot(const fs::path& csv_path, const fs::path& out_dir, std::ostream& out) {
  write_text_file(out_dir / "sweep.svg", sweep_plot_from_csv(read_text_file(csv_path)));
  out << "wrote " << (out_dir / "sweep.svg").string() << '\n';
  return kExitOk;
}

std::map<std::string, std::string> read_manifest_header(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line) && line != "---") {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

int cmd_eval(const RunConfig& cfg, const fs::path& from, const fs::path& before_path, const fs::path& after_path,
             const std::optional<std::vector<int>>& id_flag, const fs::path& out_dir, std::ostream& out,
             std::ostream& err) {
  const Pretrained in = load_inputs(from, cfg);
  const ParamSet before = load_checkpoint(before_path, Role::generator);
  const ParamSet after = load_checkpoint(after_path, Role::generator);

  std::map<std::string, std::string> manifest;
  const fs::path manifest_path = after_path.parent_path() / "manifest.txt";
  if (fs::exists(manifest_path)) {
    manifest = read_manifest_header(manifest_path);
    if (manifest.count("output_digest") && manifest["output_digest"] != params_digest(after)) {
      err << "warning: " << after_path.string() << " does not match the output digest in " << manifest_path.string()
          << '\n';
    }
    if (manifest.count("input_digest") && manifest["input_digest"] != params_digest(before)) {
      err << "warning: " << before_path.string() << " is not the input recorded in " << manifest_path.string()
          << '\n';
    }
  }
  std::vector<int> ids;
  if (id_flag) {
    ids = *id_flag;
  } else if (manifest.count("forget_ids")) {
    ids = parse_id_list(manifest["forget_ids"]);
  } else {
    throw ConfigError("--ids is required when no manifest sits next to the after checkpoint");
  }
  if (ids.empty()) throw ConfigError("the forget set is empty");
  const World world = in.world.with_forget_set(ids);
  const EvalReport report = evaluate(world, before, after, in.models, ids, world.retain_ids);
  const std::string method = manifest.count("method") ? manifest["method"] : "eval";
  write_text_file(out_dir / "report.csv", report_csv(method, ids.size(), cfg.unlearn.d, cfg.seed, report));
  out << "id_forget=" << format_sig6(report.forget.id) << " id_retain=" << format_sig6(report.retain.id)
      << " separability=" << format_sig6(report.separability) << '\n';
  return kExitOk;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-identity unlearning laboratory on a synthetic toy world"};
  app.require_subcommand(1);
  std::string config_path, from, out_dir, ids_text, method, d_text, plan, param, values_text, before, after;
  bool plot = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file (defaults apply when omitted)");
    sub->add_option("--out", out_dir, "output directory")->required();
  };
  auto add_from = [&](CLI::App* sub) {
    sub->add_option("--from", from, "directory written by the pretrain command")->required();
  };

  CLI::App* pre = app.add_subcommand("pretrain", "generate the world and pretrain generator and encoder");
  add_common(pre);

  CLI::App* unl = app.add_subcommand("unlearn", "forget a set of identities");
  add_common(unl);
  add_from(unl);
  unl->add_option("--ids", ids_text, "comma-separated identity ids")->required();
  unl->add_option("--method", method, "ours, guide, ours-v1, ours-v2 or ours-v3 (overrides the config)");
  unl->add_option("--d", d_text, "displacement in identity radii (overrides both deident.d and unlearn.d)");

  CLI::App* seq = app.add_subcommand("sequential", "forget identities in stages");
  add_common(seq);
  add_from(seq);
  seq->add_option("--plan", plan, "plan file: one stage per line, comma-separated ids")->required();
  seq->add_option("--method", method, "method override");

  CLI::App* swp = app.add_subcommand("sweep", "one unlearning run per parameter value");
  add_common(swp);
  add_from(swp);
  swp->add_option("--param", param, "d or lambda_ewc")->required();
  swp->add_option("--values", values_text, "comma-separated values")->required();
  swp->add_option("--ids", ids_text, "comma-separated identity ids")->required();
  swp->add_option("--method", method, "method override");
  swp->add_flag("--plot", plot, "also write sweep.svg");

  std::string csv_in;
  CLI::App* plt = app.add_subcommand("plot", "redraw sweep.svg from a sweep.csv");
  add_common(plt);
  plt->add_option("--csv", csv_in, "sweep.csv written by the sweep command")->required();

  CLI::App* evl = app.add_subcommand("eval", "compare two generator checkpoints");
  add_common(evl);
  add_from(evl);
  evl->add_option("--before", before, "reference generator checkpoint")->required();
  evl->add_option("--after", after, "unlearned generator checkpoint")->required();
  CLI::Option* eval_ids = evl->add_option("--ids", ids_text, "forget ids (default: read from the after manifest)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  if (config_path.empty()) cfg.finalize();
  if (!method.empty()) cfg.unlearn.method = parse_method(method);
  if (!d_text.empty()) cfg.unlearn.d = cfg.deident.d = parse_number(d_text, "--d");
  cfg.finalize();

  const fs::path out_path(out_dir);
  if (!from.empty()) require_distinct(out_path, from);
  if (*pre) return cmd_pretrain(cfg, out_path, out);
  if (*unl) return cmd_unlearn(cfg, from, parse_id_list(ids_text), out_path, out);
  if (*seq) return cmd_sequential(cfg, from, plan, out_path, out);
  if (*plt) return cmd_plot(csv_in, out_path, out);
  if (*swp) return cmd_sweep(cfg, from, param, parse_number_list(values_text), parse_id_list(ids_text), plot, out_path, out);
  std::optional<std::vector<int>> id_flag;
  if (*eval_ids) id_flag = parse_id_list(ids_text);
  return cmd_eval(cfg, from, before, after, id_flag, out_path, out, err);
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cell;
  std::istringstream in(text);
  while (std::getline(in, cell, sep)) parts.push_back(cell);
  if (!text.empty() && text.back() == sep) parts.emplace_back();
  return parts;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const UnknownIdentityError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUnknownId;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const PretrainCriterionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitArtifact;
  } catch (const ArtifactError& e) {
    err << "error: " << e.what() << '\n';
    return kExitArtifact;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitArtifact;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DegenerateDirectionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  }
}

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::vector<double>& x,
                          const std::vector<PlotSeries>& series) {
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 130, kTop = 40, kBottom = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  if (x.empty()) throw ConfigError("svg_line_plot: no x values");
  for (const PlotSeries& s : series) {
    if (s.y.size() != x.size()) throw ConfigError("svg_line_plot: series " + s.name + " has the wrong length");
  }
  double x0 = *std::min_element(x.begin(), x.end()), x1 = *std::max_element(x.begin(), x.end());
  double y0 = 0.0, y1 = 0.0;
  bool first = true;
  for (const PlotSeries& s : series) {
    for (double v : s.y) {
      y0 = first ? v : std::min(y0, v);
      y1 = first ? v : std::max(y1, v);
      first = false;
    }
  }
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) y1 = y0 + 1.0;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  const auto px = [&](double v) { return kLeft + (v - x0) / (x1 - x0) * pw; };
  const auto py = [&](double v) { return kTop + (y1 - v) / (y1 - y0) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << fixed2(kW / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << svg_escape(title)
      << "</text>\n"
      << "<rect x=\"" << fixed2(kLeft) << "\" y=\"" << fixed2(kTop) << "\" width=\"" << fixed2(pw) << "\" height=\""
      << fixed2(ph) << "\" fill=\"none\" stroke=\"black\"/>\n"
      << "<text x=\"" << fixed2(kLeft + pw / 2) << "\" y=\"" << fixed2(kH - 12)
      << "\" text-anchor=\"middle\" font-size=\"12\">" << svg_escape(x_label) << "</text>\n"
      << "<text x=\"" << fixed2(kLeft - 6) << "\" y=\"" << fixed2(kTop + 4) << "\" text-anchor=\"end\" font-size=\"10\">"
      << format_sig6(y1) << "</text>\n"
      << "<text x=\"" << fixed2(kLeft - 6) << "\" y=\"" << fixed2(kTop + ph) << "\" text-anchor=\"end\" font-size=\"10\">"
      << format_sig6(y0) << "</text>\n"
      << "<text x=\"" << fixed2(kLeft) << "\" y=\"" << fixed2(kTop + ph + 14) << "\" text-anchor=\"middle\" font-size=\"10\">"
      << format_sig6(x0) << "</text>\n"
      << "<text x=\"" << fixed2(kLeft + pw) << "\" y=\"" << fixed2(kTop + ph + 14)
      << "\" text-anchor=\"middle\" font-size=\"10\">" << format_sig6(x1) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % std::size(kColors)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < x.size(); ++i) svg << (i ? " " : "") << fixed2(px(x[i])) << ',' << fixed2(py(series[s].y[i]));
    svg << "\"/>\n"
        << "<text x=\"" << fixed2(kW - kRight + 10) << "\" y=\"" << fixed2(kTop + 16 + 18.0 * s) << "\" fill=\"" << color
        << "\" font-size=\"12\">" << svg_escape(series[s].name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string sweep_plot_from_csv(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("sweep csv is empty");
  const std::vector<std::string> header = split(line, ',');
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigError("sweep csv has no column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_param = column("param"), c_value = column("value");
  const std::size_t c_forget = column("id_forget"), c_retain = column("id_retain");
  std::string param;
  std::vector<double> x;
  PlotSeries forget{"id_forget", {}}, retain{"id_retain", {}};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = split(line, ',');
    if (cells.size() != header.size()) throw ConfigError("sweep csv row has " + std::to_string(cells.size()) + " cells");
    param = cells[c_param];
    x.push_back(parse_number(cells[c_value], "value"));
    forget.y.push_back(parse_number(cells[c_forget], "id_forget"));
    retain.y.push_back(parse_number(cells[c_retain], "id_retain"));
  }
  if (x.empty()) throw ConfigError("sweep csv has no rows");
  return svg_line_plot("ID similarity vs " + param, param, x, {forget, retain});
}

}  // namespace idf
