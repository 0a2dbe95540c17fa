#include "pesn/experiment.hpp"

#include "pesn/csv.hpp"
#include "pesn/parallel.hpp"
#include "pesn/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace pesn {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* library_version = "0.1.0";
constexpr double nan = std::numeric_limits<double>::quiet_NaN();

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

std::size_t steps_for(double time, double dt) { return static_cast<std::size_t>(std::llround(time / dt)); }

// --- JSON helpers ------------------------------------------------------------

/// Reads fields of one JSON object and rejects keys nobody asked for.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw config_error("config: " + path_ + " must be an object");
    }

    template <typename T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw config_error("config: " + name(key) + ": " + e.what());
        }
    }

    const json* child(const char* key)
    {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw config_error("config: unknown key " + (path_.empty() ? k : path_ + "." + k));
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), idx(v.size())); }
std::vector<double> from_vec(const Vec& v) { return {v.data(), v.data() + v.size()}; }

void read_vec(Fields& f, const char* key, Vec& out)
{
    if (const json* j = f.child(key)) {
        try {
            out = to_vec(j->get<std::vector<double>>());
        } catch (const json::exception& e) {
            throw config_error("config: " + f.name(key) + ": " + e.what());
        }
    }
}

void read_bounds(Fields& f, const char* key, Bounds& out)
{
    if (const json* j = f.child(key)) {
        std::vector<double> v;
        try {
            v = j->get<std::vector<double>>();
        } catch (const json::exception& e) {
            throw config_error("config: " + f.name(key) + ": " + e.what());
        }
        if (v.size() != 2) throw config_error("config: " + f.name(key) + " must be [lo, hi]");
        out = {v[0], v[1]};
    }
}

LorenzParams params_from(const std::vector<double>& v, const std::string& where)
{
    if (v.size() != 3) throw config_error("config: " + where + " must be [s, r, b]");
    return {v[0], v[1], v[2]};
}

void read_regime(Fields& f, const char* key, LorenzParams& out)
{
    if (const json* j = f.child(key)) {
        try {
            out = params_from(j->get<std::vector<double>>(), f.name(key));
        } catch (const json::exception& e) {
            throw config_error("config: " + f.name(key) + ": " + e.what());
        } catch (const invalid_state_error& e) {
            throw config_error("config: " + f.name(key) + ": " + e.what());
        }
    }
}

void read_regimes(Fields& f, const char* key, std::vector<LorenzParams>& out)
{
    if (const json* j = f.child(key)) {
        std::vector<std::vector<double>> list;
        try {
            list = j->get<std::vector<std::vector<double>>>();
        } catch (const json::exception& e) {
            throw config_error("config: " + f.name(key) + ": " + e.what());
        }
        out.clear();
        for (const auto& v : list) {
            try {
                out.push_back(params_from(v, f.name(key)));
            } catch (const invalid_state_error& e) {
                throw config_error("config: " + f.name(key) + ": " + e.what());
            }
        }
    }
}

json regime_json(const LorenzParams& p) { return json::array({p.s(), p.r(), p.b()}); }

json regimes_json(const std::vector<LorenzParams>& ps)
{
    json a = json::array();
    for (const auto& p : ps) a.push_back(regime_json(p));
    return a;
}

void read_esn(Fields& f, EsnHyperParams& h)
{
    f.get("n_reservoir", h.n_reservoir);
    f.get("n_conn", h.n_conn);
    f.get("rho", h.rho);
    f.get("sigma_in", h.sigma_in);
    f.get("alpha", h.alpha);
    f.get("lambda", h.lambda);
    read_vec(f, "sigma_p", h.sigma_p);
    read_vec(f, "k_p", h.k_p);
    f.get("seed", h.seed);
    std::string norm(to_string(h.normalization)), layout(to_string(h.input_layout));
    f.get("normalization", norm);
    f.get("input_layout", layout);
    h.normalization = input_normalization_from_string(norm);
    h.input_layout = input_layout_from_string(layout);
}

json esn_json(const EsnHyperParams& h)
{
    return {{"n_reservoir", h.n_reservoir}, {"n_conn", h.n_conn},       {"rho", h.rho},
            {"sigma_in", h.sigma_in},       {"alpha", h.alpha},         {"lambda", h.lambda},
            {"sigma_p", from_vec(h.sigma_p)}, {"k_p", from_vec(h.k_p)}, {"seed", h.seed},
            {"normalization", to_string(h.normalization)}, {"input_layout", to_string(h.input_layout)}};
}

std::string utc_now()
{
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void ensure_dir(const std::string& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw error("cannot create run directory " + dir);
}

std::string join(const std::string& dir, const std::string& rel) { return (fs::path(dir) / rel).string(); }

void write_text(const std::string& path, const std::string& text)
{
    auto os = open_output(path);
    os << text;
    if (!os) throw error("write failed: " + path);
}

Esn load_run_model(const std::string& dir)
{
    const std::string path = join(dir, "model.pesn");
    if (!fs::exists(path)) throw error("no trained model in " + dir + "; run train or search first");
    return load_model(path);
}

std::vector<LorenzParams> panel_regimes(const RunConfig& config)
{
    std::vector<LorenzParams> out;
    for (std::size_t j = 0; j < 3; ++j)
        for (double v : config.grid.axis(j)) out.push_back(config.sensitivity.panel_base.with(j, v));
    return out;
}

void append_unique(std::vector<LorenzParams>& list, const LorenzParams& p)
{
    if (std::find(list.begin(), list.end(), p) == list.end()) list.push_back(p);
}

/// Writes the model archive, its sidecar and the validation report of a trained model.
void write_model_outputs(const std::string& dir, const Esn& model, const RunData& data, const Vec& errors,
                         std::vector<std::string>& outputs)
{
    save_model(join(dir, "model.pesn"), model);
    write_text(join(dir, "model.json"), model_json(model));
    auto os = open_output(join(dir, "validation.csv"));
    CsvWriter csv(os);
    csv.header({"s", "r", "b", "lyapunov_time", "error"});
    for (std::size_t j = 0; j < data.validation.size(); ++j) {
        const auto& v = data.validation[j];
        csv << v.data.regime[0] << v.data.regime[1] << v.data.regime[2] << v.lyapunov_time << errors[idx(j)];
        csv.end_row();
    }
    outputs.insert(outputs.end(), {"model.pesn", "model.json", "validation.csv"});
}

}  // namespace

// --- configuration -------------------------------------------------------------

std::vector<LorenzParams> RegimeGrid::points() const
{
    std::vector<LorenzParams> out;
    for (double sv : s)
        for (double rv : r)
            for (double bv : b) out.emplace_back(sv, rv, bv);
    return out;
}

const std::vector<double>& RegimeGrid::axis(std::size_t param_index) const
{
    switch (param_index) {
    case 0: return s;
    case 1: return r;
    case 2: return b;
    default: throw shape_error("RegimeGrid::axis: index out of range");
    }
}

void RunConfig::validate() const
{
    if (name.empty()) throw config_error("config: name must not be empty");
    if (train_regimes.empty() != validation_regimes.empty())
        throw config_error("config: give both train_regimes and validation_regimes or neither");
    if (train_regimes.empty()) {
        if (grid.s.empty() || grid.r.empty() || grid.b.empty()) throw config_error("config: empty regime grid");
        if (n_train < 1 || n_validation < 1) throw config_error("config: need at least one training and one validation regime");
    }
    for (const auto& v : validation_regimes)
        if (std::find(train_regimes.begin(), train_regimes.end(), v) != train_regimes.end())
            throw config_error("config: training and validation regimes overlap");
    if (!(data.dt > 0.0) || !(data.washout_time > 0.0) || !(data.train_time > data.dt) || !(data.transient_time >= 0.0))
        throw config_error("config: invalid data settings");
    if (!(lyapunov.horizon_time > 0.0) || !(lyapunov.renorm_interval > 0.0) || !(lyapunov.transient_time >= 0.0))
        throw config_error("config: invalid Lyapunov settings");
    esn.validate();
    if (esn.sigma_p.size() != 3) throw config_error("config: esn.sigma_p and esn.k_p need one entry per parameter");
    SearchSpace space = search;
    space.base = esn;
    space.validate();
    if (!(validation.horizon_lt > 0.0) || !(validation.diverged_penalty > 0.0) || !(validation.divergence_bound > 0.0))
        throw config_error("config: invalid validation settings");
    if (predict.n_initial_conditions < 1 || !(predict.window_lt > 0.0) || !(predict.spacing_lt > 0.0)
        || !(predict.threshold > 0.0))
        throw config_error("config: invalid predict settings");
    if (!(stats.duration_lt > 0.0) || !(stats.true_duration_lt > 0.0) || stats.bins < 1)
        throw config_error("config: invalid stats settings");
    EnsembleConfig e = sensitivity.ensemble;
    e.lyapunov_time = 1.0;
    e.dt = data.dt;
    e.validate();
    if (!(compare.true_duration_lt > 0.0) || !(compare.esn_duration_lt > 0.0) || compare.degree < 1)
        throw config_error("config: invalid compare settings");
    if (objective.component >= 3) throw config_error("config: objective component must be 0, 1 or 2");
}

RunConfig parse_config(const std::string& json_text)
{
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw config_error(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig c;
    Fields f(root, "");
    f.get("name", c.name);
    f.get("seed", c.seed);
    if (const json* j = f.child("grid")) {
        Fields g(*j, "grid");
        g.get("s", c.grid.s);
        g.get("r", c.grid.r);
        g.get("b", c.grid.b);
        g.finish();
    }
    f.get("n_train", c.n_train);
    f.get("n_validation", c.n_validation);
    read_regimes(f, "train_regimes", c.train_regimes);
    read_regimes(f, "validation_regimes", c.validation_regimes);
    if (const json* j = f.child("data")) {
        Fields g(*j, "data");
        g.get("dt", c.data.dt);
        g.get("transient_time", c.data.transient_time);
        g.get("washout_time", c.data.washout_time);
        g.get("train_time", c.data.train_time);
        g.finish();
    }
    if (const json* j = f.child("lyapunov")) {
        Fields g(*j, "lyapunov");
        g.get("horizon_time", c.lyapunov.horizon_time);
        g.get("transient_time", c.lyapunov.transient_time);
        g.get("renorm_interval", c.lyapunov.renorm_interval);
        g.get("chaos_threshold", c.lyapunov.chaos_threshold);
        g.finish();
    }
    if (const json* j = f.child("esn")) {
        Fields g(*j, "esn");
        read_esn(g, c.esn);
        g.finish();
    }
    if (const json* j = f.child("search")) {
        Fields g(*j, "search");
        read_bounds(g, "rho", c.search.rho);
        read_bounds(g, "sigma_in", c.search.sigma_in);
        read_bounds(g, "alpha", c.search.alpha);
        read_bounds(g, "lambda", c.search.lambda);
        read_bounds(g, "sigma_p", c.search.sigma_p);
        read_bounds(g, "k_p", c.search.k_p);
        g.get("budget", c.search.budget);
        g.get("n_network_realisations", c.search.n_network_realisations);
        g.get("refine_budget", c.search.refine_budget);
        g.get("refine_batch", c.search.refine_batch);
        g.get("refine_width", c.search.refine_width);
        g.finish();
    }
    if (const json* j = f.child("validation")) {
        Fields g(*j, "validation");
        g.get("horizon_lt", c.validation.horizon_lt);
        g.get("diverged_penalty", c.validation.diverged_penalty);
        g.get("divergence_bound", c.validation.divergence_bound);
        g.finish();
    }
    if (const json* j = f.child("predict")) {
        Fields g(*j, "predict");
        read_regimes(g, "regimes", c.predict.regimes);
        g.get("n_initial_conditions", c.predict.n_initial_conditions);
        g.get("window_lt", c.predict.window_lt);
        g.get("spacing_lt", c.predict.spacing_lt);
        g.get("threshold", c.predict.threshold);
        g.finish();
    }
    if (const json* j = f.child("stats")) {
        Fields g(*j, "stats");
        read_regimes(g, "regimes", c.stats.regimes);
        g.get("n_validation_regimes", c.stats.n_validation_regimes);
        g.get("duration_lt", c.stats.duration_lt);
        g.get("true_duration_lt", c.stats.true_duration_lt);
        g.get("bins", c.stats.bins);
        g.finish();
    }
    if (const json* j = f.child("sensitivity")) {
        Fields g(*j, "sensitivity");
        auto& e = c.sensitivity.ensemble;
        g.get("n_members", e.n_members);
        g.get("window_lt", e.window_lt);
        std::string init(to_string(e.member_init));
        g.get("member_init", init);
        e.member_init = member_init_from_string(init);
        g.get("identical_member_seeds", e.identical_member_seeds);
        g.get("max_diverged_fraction", e.max_diverged_fraction);
        g.get("transient_time", e.transient_time);
        g.get("washout_time", e.washout_time);
        g.get("spin_up_lt", e.spin_up_lt);
        g.get("spacing_lt", e.spacing_lt);
        g.get("divergence_cap", e.divergence_cap);
        read_regimes(g, "regimes", c.sensitivity.regimes);
        g.get("panels", c.sensitivity.panels);
        read_regime(g, "panel_base", c.sensitivity.panel_base);
        g.finish();
    }
    if (const json* j = f.child("compare")) {
        Fields g(*j, "compare");
        g.get("true_duration_lt", c.compare.true_duration_lt);
        g.get("esn_duration_lt", c.compare.esn_duration_lt);
        g.get("degree", c.compare.degree);
        g.finish();
    }
    if (const json* j = f.child("objective")) {
        Fields g(*j, "objective");
        g.get("component", c.objective.component);
        g.finish();
    }
    f.finish();
    c.sensitivity.ensemble.dt = c.data.dt;
    c.validate();
    return c;
}

RunConfig load_config(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw config_error("config: cannot read " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string config_json(const RunConfig& c)
{
    const auto& e = c.sensitivity.ensemble;
    json j;
    j["name"] = c.name;
    j["seed"] = c.seed;
    j["grid"] = {{"s", c.grid.s}, {"r", c.grid.r}, {"b", c.grid.b}};
    j["n_train"] = c.n_train;
    j["n_validation"] = c.n_validation;
    j["train_regimes"] = regimes_json(c.train_regimes);
    j["validation_regimes"] = regimes_json(c.validation_regimes);
    j["data"] = {{"dt", c.data.dt},
                 {"transient_time", c.data.transient_time},
                 {"washout_time", c.data.washout_time},
                 {"train_time", c.data.train_time}};
    j["lyapunov"] = {{"horizon_time", c.lyapunov.horizon_time},
                     {"transient_time", c.lyapunov.transient_time},
                     {"renorm_interval", c.lyapunov.renorm_interval},
                     {"chaos_threshold", c.lyapunov.chaos_threshold}};
    j["esn"] = esn_json(c.esn);
    auto bounds = [](const Bounds& b) { return json::array({b.lo, b.hi}); };
    j["search"] = {{"rho", bounds(c.search.rho)},
                   {"sigma_in", bounds(c.search.sigma_in)},
                   {"alpha", bounds(c.search.alpha)},
                   {"lambda", bounds(c.search.lambda)},
                   {"sigma_p", bounds(c.search.sigma_p)},
                   {"k_p", bounds(c.search.k_p)},
                   {"budget", c.search.budget},
                   {"n_network_realisations", c.search.n_network_realisations},
                   {"refine_budget", c.search.refine_budget},
                   {"refine_batch", c.search.refine_batch},
                   {"refine_width", c.search.refine_width}};
    j["validation"] = {{"horizon_lt", c.validation.horizon_lt},
                       {"diverged_penalty", c.validation.diverged_penalty},
                       {"divergence_bound", c.validation.divergence_bound}};
    j["predict"] = {{"regimes", regimes_json(c.predict.regimes)},
                    {"n_initial_conditions", c.predict.n_initial_conditions},
                    {"window_lt", c.predict.window_lt},
                    {"spacing_lt", c.predict.spacing_lt},
                    {"threshold", c.predict.threshold}};
    j["stats"] = {{"regimes", regimes_json(c.stats.regimes)},
                  {"n_validation_regimes", c.stats.n_validation_regimes},
                  {"duration_lt", c.stats.duration_lt},
                  {"true_duration_lt", c.stats.true_duration_lt},
                  {"bins", c.stats.bins}};
    j["sensitivity"] = {{"n_members", e.n_members},
                        {"window_lt", e.window_lt},
                        {"member_init", to_string(e.member_init)},
                        {"identical_member_seeds", e.identical_member_seeds},
                        {"max_diverged_fraction", e.max_diverged_fraction},
                        {"transient_time", e.transient_time},
                        {"washout_time", e.washout_time},
                        {"spin_up_lt", e.spin_up_lt},
                        {"spacing_lt", e.spacing_lt},
                        {"divergence_cap", e.divergence_cap},
                        {"regimes", regimes_json(c.sensitivity.regimes)},
                        {"panels", c.sensitivity.panels},
                        {"panel_base", regime_json(c.sensitivity.panel_base)}};
    j["compare"] = {{"true_duration_lt", c.compare.true_duration_lt},
                    {"esn_duration_lt", c.compare.esn_duration_lt},
                    {"degree", c.compare.degree}};
    j["objective"] = {{"component", c.objective.component}};
    return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& config)
{
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(config_json(config))));
    return buf;
}

void apply_env_overrides(RunConfig& config)
{
    if (const char* env = std::getenv("PESN_SEED")) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
            config.seed = v;
        } catch (const std::exception&) {
            throw config_error(std::string("PESN_SEED is not an unsigned integer: ") + env);
        }
    }
}

// --- regimes and data ----------------------------------------------------------

LyapunovEstimate regime_lyapunov(const LorenzParams& params, const RunConfig& config)
{
    const auto& l = config.lyapunov;
    const IntegrationConfig ic{config.data.dt, steps_for(l.horizon_time, config.data.dt),
                               steps_for(l.transient_time, config.data.dt)};
    return lyapunov_time(params, ic, derive_seed(config.seed, "lyapunov"), l.renorm_interval);
}

std::vector<RegimeInfo> select_regimes(const RunConfig& config)
{
    config.validate();
    std::vector<RegimeInfo> out;
    auto classify = [&](const LorenzParams& p, const char* wanted) {
        RegimeInfo info;
        info.params = p;
        try {
            info.lyapunov = regime_lyapunov(p, config);
            info.role = info.lyapunov.chaotic(config.lyapunov.chaos_threshold) ? wanted : "non_chaotic";
        } catch (const blowup_error&) {
            info.role = "failed";
        }
        return info;
    };
    if (!config.train_regimes.empty()) {
        for (const auto& p : config.train_regimes) out.push_back(classify(p, "train"));
        for (const auto& p : config.validation_regimes) out.push_back(classify(p, "validation"));
        return out;
    }
    std::vector<LorenzParams> grid = config.grid.points();
    Rng rng(derive_seed(config.seed, "regime-shuffle"));
    for (std::size_t i = grid.size() - 1; i > 0; --i) std::swap(grid[i], grid[rng.index(i + 1)]);
    std::size_t n_train = 0, n_val = 0;
    for (const auto& p : grid) {
        if (n_train == config.n_train && n_val == config.n_validation) break;
        RegimeInfo info = classify(p, n_train < config.n_train ? "train" : "validation");
        if (info.role == "train") ++n_train;
        if (info.role == "validation") ++n_val;
        out.push_back(std::move(info));
    }
    if (n_train < config.n_train || n_val < config.n_validation)
        throw config_error("select_regimes: the grid has too few chaotic regimes");
    return out;
}

RegimeDataset make_dataset(const LorenzParams& params, const DataSettings& settings, std::uint64_t seed)
{
    const std::size_t w = steps_for(settings.washout_time, settings.dt);
    const std::size_t t = steps_for(settings.train_time, settings.dt) + 1;
    const Series s = simulate(params, random_initial_condition(params, seed),
                              {settings.dt, w + t - 1, steps_for(settings.transient_time, settings.dt)})
                         .as_series();
    return {params.as_vector(), s.leftCols(idx(w)), s.rightCols(idx(t)), settings.dt};
}

RunData load_run_data(const std::string& dir)
{
    const std::string index = join(dir, "regimes.csv");
    if (!fs::exists(index)) throw error("no datasets in " + dir + "; run generate first");
    const CsvTable t = read_csv(index);
    RunData out;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        RegimeInfo info;
        info.params = LorenzParams(t.number(i, "s"), t.number(i, "r"), t.number(i, "b"));
        info.lyapunov.lambda_max = t.number(i, "lambda_max");
        info.lyapunov.lyapunov_time = t.number(i, "lyapunov_time");
        info.role = t.at(i, "role");
        info.file = t.at(i, "file");
        if (!info.file.empty()) {
            const CsvTable d = read_csv(join(dir, info.file));
            std::vector<std::size_t> wash, train;
            for (std::size_t k = 0; k < d.rows.size(); ++k) (d.at(k, "phase") == "washout" ? wash : train).push_back(k);
            auto series = [&](const std::vector<std::size_t>& rows) {
                Series s(3, idx(rows.size()));
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    s(0, idx(k)) = d.number(rows[k], "x");
                    s(1, idx(k)) = d.number(rows[k], "y");
                    s(2, idx(k)) = d.number(rows[k], "z");
                }
                return s;
            };
            double dt = d.rows.size() > 1 ? d.number(1, "t") - d.number(0, "t") : 0.0;
            if (d.rows.size() > 1) dt = (d.number(d.rows.size() - 1, "t") - d.number(0, "t")) / static_cast<double>(d.rows.size() - 1);
            RegimeDataset ds{info.params.as_vector(), series(wash), series(train), dt};
            ds.validate();
            if (info.role == "train") out.train.push_back(std::move(ds));
            else if (info.role == "validation") out.validation.push_back({std::move(ds), info.lyapunov.lyapunov_time});
        }
        out.regimes.push_back(std::move(info));
    }
    if (out.train.empty() || out.validation.empty()) throw error("run data in " + dir + " lacks training or validation regimes");
    return out;
}

// --- commands ------------------------------------------------------------------

GenerateResult cmd_generate(const RunConfig& config, const std::string& dir)
{
    const std::string started = utc_now();
    config.validate();
    ensure_dir(dir);
    ensure_dir(join(dir, "data"));
    GenerateResult out;
    out.data.regimes = select_regimes(config);
    std::size_t n_train = 0, n_val = 0;
    for (auto& info : out.data.regimes) {
        if (info.role != "train" && info.role != "validation") continue;
        const bool is_train = info.role == "train";
        const std::size_t k = is_train ? n_train++ : n_val++;
        char name[64];
        std::snprintf(name, sizeof(name), "data/%s_%02zu.csv", is_train ? "train" : "validation", k);
        RegimeDataset ds;
        try {
            ds = make_dataset(info.params, config.data, derive_seed(config.seed, is_train ? "dataset-train" : "dataset-validation", k));
        } catch (const blowup_error&) {
            info.role = "failed";
            continue;
        }
        info.file = name;
        auto os = open_output(join(dir, name));
        CsvWriter csv(os);
        csv.header({"phase", "step", "t", "x", "y", "z"});
        const Eigen::Index nw = ds.washout.cols();
        for (Eigen::Index c = 0; c < nw + ds.train.cols(); ++c) {
            const bool wash = c < nw;
            const auto col = wash ? ds.washout.col(c) : ds.train.col(c - nw);
            csv << (wash ? "washout" : "train") << c << static_cast<double>(c) * ds.dt << col[0] << col[1] << col[2];
            csv.end_row();
        }
        out.outputs.push_back(name);
        if (is_train) out.data.train.push_back(std::move(ds));
        else out.data.validation.push_back({std::move(ds), info.lyapunov.lyapunov_time});
    }
    if (out.data.train.empty() || out.data.validation.empty())
        throw error("generate: no usable training or validation regimes");
    {
        auto os = open_output(join(dir, "regimes.csv"));
        CsvWriter csv(os);
        csv.header({"id", "role", "s", "r", "b", "lambda_max", "lyapunov_time", "file"});
        for (std::size_t i = 0; i < out.data.regimes.size(); ++i) {
            const auto& r = out.data.regimes[i];
            csv << i << r.role << r.params.s() << r.params.r() << r.params.b() << r.lyapunov.lambda_max
                << r.lyapunov.lyapunov_time << r.file;
            csv.end_row();
        }
        out.outputs.push_back("regimes.csv");
    }
    update_manifest(dir, "generate", config, out.outputs, started);
    return out;
}

TrainResult cmd_train(const RunConfig& config, const std::string& dir)
{
    const std::string started = utc_now();
    config.validate();
    const RunData data = load_run_data(dir);
    TrainResult out;
    out.model = train(make_esn(config.esn, 3, 3), data.train);
    out.validation_errors = validation_errors(out.model, data.validation, config.validation);
    write_model_outputs(dir, out.model, data, out.validation_errors, out.outputs);
    update_manifest(dir, "train", config, out.outputs, started);
    return out;
}

TrainResult cmd_search(const RunConfig& config, const std::string& dir)
{
    const std::string started = utc_now();
    config.validate();
    const RunData data = load_run_data(dir);
    SearchSpace space = config.search;
    space.base = config.esn;
    TrainResult out;
    out.search = search(space, data.train, data.validation, derive_seed(config.seed, "search"), config.validation);
    {
        auto os = open_output(join(dir, "search_history.csv"));
        write_history_csv(os, out.search->history, data.validation);
        out.outputs.push_back("search_history.csv");
    }
    // The winner's own seed is its first network realisation.
    out.model = train(make_esn(out.search->best, 3, 3), data.train);
    out.validation_errors = validation_errors(out.model, data.validation, config.validation);
    write_model_outputs(dir, out.model, data, out.validation_errors, out.outputs);
    update_manifest(dir, "search", config, out.outputs, started);
    return out;
}

PredictResult cmd_predict(const RunConfig& config, const std::string& dir)
{
    const std::string started = utc_now();
    config.validate();
    const Esn model = load_run_model(dir);
    const double dt = config.data.dt;
    const std::size_t w = steps_for(config.data.washout_time, dt);
    PredictResult out;
    auto hos = open_output(join(dir, "horizons.csv"));
    CsvWriter hcsv(hos);
    hcsv.header({"regime", "s", "r", "b", "lyapunov_time", "initial_condition", "horizon_lt"});
    for (std::size_t i = 0; i < config.predict.regimes.size(); ++i) {
        const LorenzParams& p = config.predict.regimes[i];
        RegimePrediction rp;
        rp.params = p;
        const LyapunovEstimate le = regime_lyapunov(p, config);
        if (!le.chaotic(config.lyapunov.chaos_threshold)) throw error("predict: regime is not chaotic, no Lyapunov time");
        rp.lyapunov_time = le.lyapunov_time;
        const std::size_t n = steps_for(config.predict.window_lt * rp.lyapunov_time, dt);
        const auto ics = sample_attractor(p, config.predict.n_initial_conditions, config.predict.spacing_lt * rp.lyapunov_time,
                                          derive_seed(config.seed, "predict", i), dt, config.data.transient_time);
        std::vector<Series> truths(ics.size());
        parallel_for(ics.size(), [&](std::size_t k) { truths[k] = simulate(p, ics[k], {dt, w + n, 0}).as_series(); });
        rp.horizons.resize(ics.size());
        parallel_for(ics.size(), [&](std::size_t k) {
            rp.horizons[k] = predictability_horizon(model, p.as_vector(), truths[k], w, dt, rp.lyapunov_time,
                                                    config.predict.threshold);
        });
        double sum = 0.0;
        for (std::size_t k = 0; k < ics.size(); ++k) {
            sum += rp.horizons[k];
            hcsv << i << p.s() << p.r() << p.b() << rp.lyapunov_time << k << rp.horizons[k];
            hcsv.end_row();
        }
        rp.mean_horizon = sum / static_cast<double>(ics.size());

        // Time series of the first initial condition for plotting.
        char name[64];
        std::snprintf(name, sizeof(name), "prediction_%02zu.csv", i);
        const Series& truth = truths.front();
        const Vec r0 = washout(model, Vec::Zero(idx(model.n_reservoir())), truth.leftCols(idx(w)), p.as_vector());
        Series pred;
        try {
            pred = closed_loop(model, r0, n, p.as_vector()).outputs;
        } catch (const blowup_error&) {
            pred = Series::Constant(3, idx(n), nan);
        }
        auto os = open_output(join(dir, name));
        CsvWriter csv(os);
        csv.header({"t_lt", "x_true", "y_true", "z_true", "x_esn", "y_esn", "z_esn"});
        for (std::size_t k = 0; k < n; ++k) {
            const auto y = truth.col(idx(w + 1 + k));
            csv << static_cast<double>(k + 1) * dt / rp.lyapunov_time << y[0] << y[1] << y[2] << pred(0, idx(k))
                << pred(1, idx(k)) << pred(2, idx(k));
            csv.end_row();
        }
        out.outputs.push_back(name);
        out.regimes.push_back(std::move(rp));
    }
    out.outputs.push_back("horizons.csv");
    update_manifest(dir, "predict", config, out.outputs, started);
    return out;
}

StatsResult cmd_stats(const RunConfig& config, const std::string& dir)
{
    const std::string started = utc_now();
    config.validate();
    const Esn model = load_run_model(dir);
    std::vector<LorenzParams> regimes = config.stats.regimes;
    if (config.stats.n_validation_regimes > 0) {
        const RunData data = load_run_data(dir);
        if (data.validation.size() < config.stats.n_validation_regimes)
            throw config_error("stats: fewer validation regimes than requested");
        for (std::size_t j = 0; j < config.stats.n_validation_regimes; ++j)
            append_unique(regimes, LorenzParams::from_vector(data.validation[j].data.regime));
    }
    const double dt = config.data.dt;
    const std::size_t w = steps_for(config.data.washout_time, dt);
    StatsResult out;
    out.regimes.resize(regimes.size());
    parallel_for(regimes.size(), [&](std::size_t i) {
        const LorenzParams& p = regimes[i];
        RegimeStats& rs = out.regimes[i];
        rs.params = p;
        const LyapunovEstimate le = regime_lyapunov(p, config);
        if (!le.chaotic(config.lyapunov.chaos_threshold)) throw error("stats: regime is not chaotic, no Lyapunov time");
        rs.lyapunov_time = le.lyapunov_time;
        const LorenzState start =
            simulate(p, random_initial_condition(p, derive_seed(config.seed, "stats", i)), {dt, 0, steps_for(config.data.transient_time, dt)})
                .states.front();
        const std::size_t n_true = std::max<std::size_t>(w + 1, steps_for(config.stats.true_duration_lt * rs.lyapunov_time, dt));
        const Series truth = simulate(p, start, {dt, n_true - 1, 0}).as_series();
        const Vec mean = truth.rowwise().mean();
        const Vec sd = ((truth.colwise() - mean).rowwise().squaredNorm() / static_cast<double>(truth.cols())).cwiseSqrt();
        StatsOptions so;
        so.dt = dt;
        so.transient_time = config.data.transient_time;
        so.bins = config.stats.bins;
        for (Eigen::Index c = 0; c < 3; ++c) so.ranges.emplace_back(mean[c] - 4.0 * sd[c], mean[c] + 4.0 * sd[c]);
        rs.truth = series_stats(truth, so.ranges, so.bins);
        try {
            rs.esn = long_term_stats(model, p.as_vector(), config.stats.duration_lt, rs.lyapunov_time,
                                     truth.leftCols(idx(w)), so);
        } catch (const diverged_error&) {
        } catch (const blowup_error&) {
        }
    });
    {
        auto os = open_output(join(dir, "stats_summary.csv"));
        CsvWriter csv(os);
        csv.header({"s", "r", "b", "lyapunov_time", "component", "true_mean", "esn_mean", "rel_diff_mean", "true_std",
                    "esn_std", "esn_samples", "status"});
        for (const auto& rs : out.regimes)
            for (Eigen::Index c = 0; c < 3; ++c) {
                const double em = rs.esn ? rs.esn->mean[c] : nan;
                csv << rs.params.s() << rs.params.r() << rs.params.b() << rs.lyapunov_time << "xyz"[c] << rs.truth.mean[c] << em
                    << (em - rs.truth.mean[c]) / std::abs(rs.truth.mean[c]) << rs.truth.std[c]
                    << (rs.esn ? rs.esn->std[c] : nan) << (rs.esn ? rs.esn->n_samples : 0) << (rs.esn ? "ok" : "diverged");
                csv.end_row();
            }
    }
    {
        auto os = open_output(join(dir, "histograms.csv"));
        CsvWriter csv(os);
        csv.header({"s", "r", "b", "component", "bin", "lo", "hi", "p_true", "p_esn"});
        for (const auto& rs : out.regimes)
            for (std::size_t c = 0; c < 3; ++c) {
                const Histogram& h = rs.truth.histograms[c];
                const auto bins = static_cast<std::size_t>(h.probability.size());
                const double width = (h.hi - h.lo) / static_cast<double>(bins);
                for (std::size_t k = 0; k < bins; ++k) {
                    csv << rs.params.s() << rs.params.r() << rs.params.b() << "xyz"[c] << k
                        << h.lo + width * static_cast<double>(k) << h.lo + width * static_cast<double>(k + 1)
                        << h.probability[idx(k)] << (rs.esn ? rs.esn->histograms[c].probability[idx(k)] : nan);
                    csv.end_row();
                }
            }
    }
    out.outputs = {"stats_summary.csv", "histograms.csv"};
    update_manifest(dir, "stats", config, out.outputs, started);
    return out;
}

SensitivityResult cmd_sensitivity(const RunConfig& config, const std::string& dir)
{
    const std::string started = utc_now();
    config.validate();
    const Esn model = load_run_model(dir);
    std::vector<LorenzParams> regimes;
    for (const auto& p : config.sensitivity.regimes) append_unique(regimes, p);
    if (config.sensitivity.panels)
        for (const auto& p : panel_regimes(config)) append_unique(regimes, p);

    SensitivityResult out;
    auto mos = open_output(join(dir, "sensitivity_members.csv"));
    auto sos = open_output(join(dir, "sensitivity_summary.csv"));
    bool first = true;
    for (const auto& p : regimes) {
        RegimeSensitivity rs;
        rs.params = p;
        const LyapunovEstimate le = regime_lyapunov(p, config);
        if (!le.chaotic(config.lyapunov.chaos_threshold)) throw error("sensitivity: regime is not chaotic, no Lyapunov time");
        rs.lyapunov_time = le.lyapunov_time;
        EnsembleConfig e = config.sensitivity.ensemble;
        e.seed = derive_seed(config.seed, "ensemble");
        e.lyapunov_time = rs.lyapunov_time;
        e.dt = config.data.dt;
        auto run = [&](SystemKind system, SensitivityEstimate& est, std::string& status) {
            e.system = system;
            try {
                est = ensemble_adjoint(p, e, config.objective, &model);
            } catch (const unreliable_estimate_error& u) {
                est = u.partial();
                status = "unreliable";
            }
            write_members_csv(mos, p.as_vector(), system, est, first);
            write_summary_csv(sos, p.as_vector(), system, e, est, status, first);
            first = false;
        };
        run(SystemKind::true_system, rs.truth, rs.true_status);
        run(SystemKind::esn, rs.esn, rs.esn_status);
        out.regimes.push_back(std::move(rs));
    }
    out.outputs = {"sensitivity_members.csv", "sensitivity_summary.csv"};
    update_manifest(dir, "sensitivity", config, out.outputs, started);
    return out;
}

CompareResult cmd_compare(const RunConfig& config, const std::string& dir)
{
    const std::string started = utc_now();
    config.validate();
    const Esn model = load_run_model(dir);
    const std::string summary_path = join(dir, "sensitivity_summary.csv");
    if (!fs::exists(summary_path)) throw error("compare: no sensitivity_summary.csv in " + dir + "; run sensitivity first");
    const CsvTable summary = read_csv(summary_path);

    struct Entry {
        double lyapunov_time;
        Vec mean, stderr_;
    };
    auto lookup = [&](const LorenzParams& p, const char* system) {
        for (std::size_t i = 0; i < summary.rows.size(); ++i) {
            if (summary.at(i, "system") != system) continue;
            if (LorenzParams(summary.number(i, "s"), summary.number(i, "r"), summary.number(i, "b")) != p) continue;
            return Entry{summary.number(i, "lyapunov_time"),
                         Vec3(summary.number(i, "mean_dJ_ds"), summary.number(i, "mean_dJ_dr"), summary.number(i, "mean_dJ_db")),
                         Vec3(summary.number(i, "stderr_dJ_ds"), summary.number(i, "stderr_dJ_dr"), summary.number(i, "stderr_dJ_db"))};
        }
        throw error("compare: sensitivity summary lacks a " + std::string(system) + " row for a panel regime");
    };

    CompareResult out;
    for (std::size_t j = 0; j < 3; ++j) {
        PanelComparison panel;
        panel.param_index = j;
        const auto& grid = config.grid.axis(j);
        std::vector<double> lts;
        for (double v : grid) lts.push_back(lookup(config.sensitivity.panel_base.with(j, v), "true").lyapunov_time);
        SweepOptions so;
        so.lyapunov_times = lts;
        so.seed = derive_seed(config.seed, "sweep", j);
        so.dt = config.data.dt;
        so.transient_time = config.data.transient_time;
        so.washout_time = config.data.washout_time;
        so.objective = config.objective;
        so.duration_lt = config.compare.true_duration_lt;
        panel.true_sweep = sweep_objective(config.sensitivity.panel_base, j, grid, so);
        so.system = SystemKind::esn;
        so.model = &model;
        so.duration_lt = config.compare.esn_duration_lt;
        panel.esn_sweep = sweep_objective(config.sensitivity.panel_base, j, grid, so);
        panel.fit = polyfit_direct(panel.true_sweep, config.compare.degree);
        panel.true_sweep.fit = panel.fit.fit;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const LorenzParams p = config.sensitivity.panel_base.with(j, grid[i]);
            const Entry t = lookup(p, "true"), e = lookup(p, "esn");
            PanelPoint pt{grid[i], t.lyapunov_time, t.mean, t.stderr_, e.mean, e.stderr_, panel.fit.derivative[i]};
            SensitivityEstimate te, ee;
            te.mean = t.mean;
            te.stderr_ = t.stderr_;
            ee.mean = e.mean;
            ee.stderr_ = e.stderr_;
            const auto rows = compare_estimates(p.as_vector(), te, &ee, std::make_pair(j, pt.slope));
            out.rows.insert(out.rows.end(), rows.begin(), rows.end());
            panel.points.push_back(std::move(pt));
        }
        out.panels.push_back(std::move(panel));
    }
    {
        auto os = open_output(join(dir, "sweep.csv"));
        CsvWriter csv(os);
        csv.header({"parameter", "value", "s", "r", "b", "lyapunov_time", "objective_true", "objective_esn", "esn_status",
                    "fit_value", "fit_slope"});
        for (const auto& panel : out.panels)
            for (std::size_t i = 0; i < panel.points.size(); ++i) {
                const LorenzParams p = config.sensitivity.panel_base.with(panel.param_index, panel.points[i].value);
                csv << "srb"[panel.param_index] << panel.points[i].value << p.s() << p.r() << p.b()
                    << panel.points[i].lyapunov_time << panel.true_sweep.objective[i] << panel.esn_sweep.objective[i]
                    << (panel.esn_sweep.valid[i] ? "ok" : "diverged") << panel.fit.fit.value(panel.points[i].value)
                    << panel.points[i].slope;
                csv.end_row();
            }
    }
    {
        auto os = open_output(join(dir, "comparison.csv"));
        write_comparison_csv(os, out.rows);
    }
    out.outputs = {"sweep.csv", "comparison.csv"};
    update_manifest(dir, "compare", config, out.outputs, started);
    return out;
}

void update_manifest(const std::string& dir, const std::string& command, const RunConfig& config,
                     const std::vector<std::string>& outputs, const std::string& started)
{
    const std::string path = join(dir, "manifest.json");
    json m;
    if (fs::exists(path)) {
        std::ifstream is(path);
        try {
            m = json::parse(is);
        } catch (const json::exception&) {
            m = json();
        }
    }
    if (!m.is_object() || !m.contains("commands") || !m["commands"].is_object()) {
        m = json();
        m["format"] = "pesn-manifest";
        m["version"] = 1;
        m["commands"] = json::object();
    }
    m["library_version"] = library_version;
    m["commands"][command] = {{"config_name", config.name},
                              {"config_hash", config_hash(config)},
                              {"seed", config.seed},
                              {"started", started},
                              {"finished", utc_now()},
                              {"outputs", outputs}};
    write_text(path, m.dump(2) + "\n");
}

}  // namespace pesn
