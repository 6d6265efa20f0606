// hmdc: condense a dataset with two heterogeneous models, evaluate the
// result, and export gradient-magnitude traces.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "hmdc/condenser.hpp"
#include "hmdc/errors.hpp"
#include "hmdc/evaluator.hpp"
#include "hmdc/persistence.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
    return code;
}

int exit_code_for(const hmdc::Error& e) {
    const std::string kind = e.kind();
    if (kind == "non_finite") return 3;
    if (kind == "integrity" || kind == "ingestion") return 2;
    return 1;
}

int run_condense(const fs::path& config_path, const fs::path& out_dir, std::optional<std::uint64_t> seed) {
    auto config = hmdc::load_condense_config(config_path);
    if (seed) config.seed = *seed;
    config.validate();

    const auto data = hmdc::dataset_spec(config.dataset);
    const auto train = hmdc::load_dataset(data, hmdc::Split::Train, hmdc::resolve_data_dir(config.data_cache_dir));

    fs::create_directories(out_dir);
    const auto metrics_path = out_dir / "metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw hmdc::IntegrityError("cannot write " + metrics_path.string());

    json manifest{{"config", hmdc::condense_config_to_json(config)},
                  {"seed", config.seed},
                  {"version", hmdc::kVersion},
                  {"metrics", metrics_path.string()},
                  {"start_time", hmdc::utc_timestamp()}};
    auto write_run_manifest = [&](const std::string& status) {
        manifest["end_time"] = hmdc::utc_timestamp();
        manifest["status"] = status;
        std::ofstream(out_dir / "run_manifest.json", std::ios::trunc) << manifest.dump(2) << "\n";
    };

    try {
        auto result = hmdc::run_condensation(config, train, [&](const hmdc::MetricsRecord& rec) {
            metrics << rec.to_json().dump() << '\n';
            metrics.flush();
        });
        json extra{{"config", hmdc::condense_config_to_json(config)},
                   {"seed", config.seed},
                   {"code_version", hmdc::kVersion},
                   {"created_at", hmdc::utc_timestamp()}};
        hmdc::save_artifact(result.state.synthetic, data, extra, out_dir);
        hmdc::save_checkpoint(result.state, out_dir / "checkpoint");
        manifest["runtime_s"] = result.seconds;
        write_run_manifest("ok");
        std::cout << "condensed " << result.state.synthetic.size() << " images in " << std::fixed
                  << std::setprecision(1) << result.seconds << " s -> " << out_dir.string() << "\n";
    } catch (const hmdc::NonFiniteError&) {
        write_run_manifest("aborted");
        throw;
    }
    return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw hmdc::ConfigError("invalid seed '" + item + "'");
        }
    }
    return seeds;
}

int run_evaluate(const fs::path& artifact_dir, const std::string& model, std::optional<std::int64_t> epochs,
                 const std::string& seeds, std::optional<std::int64_t> eval_every, bool baseline,
                 const fs::path& report_path) {
    const auto arch = hmdc::parse_arch(model);
    const auto artifact = hmdc::load_artifact(artifact_dir);
    const auto data = hmdc::dataset_spec(artifact.manifest.value("dataset", std::string{}));
    std::optional<std::string> cache_dir;
    if (artifact.manifest.contains("config") && artifact.manifest["config"].contains("data"))
        cache_dir = artifact.manifest["config"]["data"].value("cache_dir", std::string{});
    const auto data_dir = hmdc::resolve_data_dir(cache_dir);
    const auto test = hmdc::load_dataset(data, hmdc::Split::Test, data_dir);

    auto config = hmdc::EvalConfig::defaults(arch, data);
    if (epochs) config.epochs = *epochs;
    if (eval_every) config.eval_every = *eval_every;
    if (!seeds.empty()) config.seeds = parse_seeds(seeds);
    config.validate();

    const auto report = hmdc::evaluate_images(artifact.synthetic.images, artifact.synthetic.labels, config, test, "hmdc");
    json out{{"hmdc", report.to_json()}};
    std::cout << std::fixed << std::setprecision(4) << report.arch << ": " << report.mean << " +/- " << report.stddev
              << "\n";
    if (baseline) {
        const auto train = hmdc::load_dataset(data, hmdc::Split::Train, data_dir);
        const auto seed = artifact.manifest.value("seed", std::uint64_t{0});
        const auto base = hmdc::random_baseline(train, artifact.synthetic.ipc, config, test, seed);
        const auto cmp = hmdc::compare_report(report, base);
        out["random"] = base.to_json();
        out["comparison"] = {{"arch", cmp.arch}, {"delta", cmp.delta}, {"condensed_wins", cmp.condensed_wins}};
        std::cout << "random: " << base.mean << " +/- " << base.stddev << "  delta " << std::showpos << cmp.delta
                  << std::noshowpos << (cmp.condensed_wins ? "  (pass)" : "  (fail)") << "\n";
    }
    const auto path = report_path.empty() ? artifact_dir / "report.json" : report_path;
    std::ofstream(path, std::ios::trunc) << out.dump(2) << "\n";
    return 0;
}

int run_trace(const fs::path& metrics_path, const fs::path& out_path) {
    std::ifstream in(metrics_path);
    if (!in) throw hmdc::IntegrityError("cannot open metrics file " + metrics_path.string());
    const auto table = hmdc::export_gradient_trace(in);
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw hmdc::IntegrityError("cannot write " + out_path.string());
    hmdc::write_trace_csv(table, out);
    if (table.warnings > 0) std::cerr << "skipped " << table.warnings << " malformed metrics line(s)\n";
    std::cout << table.rows.size() << " rows -> " << out_path.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heterogeneous-model dataset condensation"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    auto* condense = app.add_subcommand("condense", "Condense a dataset into a synthetic set");
    condense->add_option("--config", config_path, "JSON config")->required();
    condense->add_option("--out", out_dir, "Output directory")->required();
    condense->add_option("--seed", seed, "Override the config seed");

    std::string artifact_dir, model, seeds, report_path;
    std::optional<std::int64_t> epochs, eval_every;
    bool baseline = false;
    auto* evaluate = app.add_subcommand("evaluate", "Train fresh models on a condensed artifact");
    evaluate->add_option("--artifact", artifact_dir, "Artifact directory")->required();
    evaluate->add_option("--model", model, "convnet or tinyvit")->required();
    evaluate->add_option("--epochs", epochs, "Training epochs");
    evaluate->add_option("--seeds", seeds, "Comma-separated seeds");
    evaluate->add_option("--eval-every", eval_every, "Epochs between test measurements");
    evaluate->add_flag("--baseline", baseline, "Also evaluate the random-real baseline");
    evaluate->add_option("--report", report_path, "Report path (default <artifact>/report.json)");

    std::string metrics_path, trace_out;
    auto* trace = app.add_subcommand("trace", "Export the gradient-magnitude trace as CSV");
    trace->add_option("--metrics", metrics_path, "metrics.jsonl")->required();
    trace->add_option("--out", trace_out, "CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail("usage", e.what(), 1);
    }

    try {
        if (*condense) return run_condense(config_path, out_dir, seed);
        if (*evaluate) return run_evaluate(artifact_dir, model, epochs, seeds, eval_every, baseline, report_path);
        if (*trace) return run_trace(metrics_path, trace_out);
    } catch (const hmdc::Error& e) {
        return fail(e.kind(), e.what(), exit_code_for(e));
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 4);
    }
    return 1;
}
