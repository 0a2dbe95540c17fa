#include "pesn/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <map>
#include <string>

namespace {

void report(const char* verb, const std::string& dir, const std::vector<std::string>& outputs)
{
    std::printf("%s: wrote %zu file(s) to %s\n", verb, outputs.size(), dir.c_str());
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Parameter-aware echo state network pipeline for Lorenz 63 sensitivities"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "pesn 0.1.0");

    std::string config_path, out_dir;
    struct Verb {
        const char* help;
        std::function<std::vector<std::string>(const pesn::RunConfig&, const std::string&)> run;
    };
    const std::map<std::string, Verb> verbs{
        {"generate", {"simulate training and validation regimes", [](auto& c, auto& d) { return pesn::cmd_generate(c, d).outputs; }}},
        {"train", {"train the ESN with the configured hyperparameters", [](auto& c, auto& d) { return pesn::cmd_train(c, d).outputs; }}},
        {"search", {"random hyperparameter search, then train the winner", [](auto& c, auto& d) { return pesn::cmd_search(c, d).outputs; }}},
        {"predict", {"short-term forecasts and predictability horizons", [](auto& c, auto& d) { return pesn::cmd_predict(c, d).outputs; }}},
        {"stats", {"long-term statistics and histograms", [](auto& c, auto& d) { return pesn::cmd_stats(c, d).outputs; }}},
        {"sensitivity", {"ensemble-adjoint sensitivities, true system and ESN", [](auto& c, auto& d) { return pesn::cmd_sensitivity(c, d).outputs; }}},
        {"compare", {"objective sweeps, polynomial fits and comparison table", [](auto& c, auto& d) { return pesn::cmd_compare(c, d).outputs; }}},
    };
    for (const auto& [name, verb] : verbs) {
        CLI::App* sub = app.add_subcommand(name, verb.help);
        sub->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "run directory")->required();
    }

    CLI11_PARSE(app, argc, argv);

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        pesn::RunConfig config = pesn::load_config(config_path);
        pesn::apply_env_overrides(config);
        report(name.c_str(), out_dir, verbs.at(name).run(config, out_dir));
    } catch (const std::exception& e) {
        std::fprintf(stderr, "pesn %s: %s\n", name.c_str(), e.what());
        return 1;
    }
    return 0;
}
