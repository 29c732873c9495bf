#include "kernreg/run_config.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

namespace kernreg {

namespace {

using nlohmann::json;

[[noreturn]] void config_fail(const std::string& where, const std::string& why) {
    throw_config("config: " + where + ": " + why);
}

void require_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) config_fail(where, "expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) config_fail(where, "unknown key '" + it.key() + "'");
}

double num(const json& j, const std::string& where) {
    if (!j.is_number()) config_fail(where, "expected a number");
    return j.get<double>();
}

std::int64_t integer(const json& j, const std::string& where) {
    if (!j.is_number_integer()) config_fail(where, "expected an integer");
    return j.get<std::int64_t>();
}

std::string text(const json& j, const std::string& where) {
    if (!j.is_string()) config_fail(where, "expected a string");
    return j.get<std::string>();
}

DeformFamily parse_family(const json& j, const std::string& where) {
    require_keys(j, where,
                 {"translation", "rotation_deg", "scaling_log", "elastic_sigma", "elastic_amplitude"});
    std::vector<DeformFamily> parts;
    if (j.contains("translation")) parts.push_back(DeformFamily::translation(num(j["translation"], where)));
    if (j.contains("rotation_deg"))
        parts.push_back(DeformFamily::rotation(num(j["rotation_deg"], where) * std::numbers::pi / 180.0));
    if (j.contains("scaling_log")) parts.push_back(DeformFamily::scaling(num(j["scaling_log"], where)));
    if (j.contains("elastic_amplitude")) {
        double sigma = j.contains("elastic_sigma") ? num(j["elastic_sigma"], where) : 2.0;
        parts.push_back(DeformFamily::elastic(sigma, num(j["elastic_amplitude"], where)));
    }
    if (parts.empty()) config_fail(where, "deformation family is empty");
    if (parts.size() == 1) return parts[0];
    return DeformFamily::composed(parts);
}

Geometry parse_geometry(const json& j, const std::string& where) { return geometry_from_name(text(j, where)); }

AttackConfig parse_attack(const json& j, const std::string& where, int default_steps) {
    AttackConfig cfg;
    cfg.steps = default_steps;
    if (j.contains("epsilon")) cfg.epsilon = num(j["epsilon"], where + ".epsilon");
    if (j.contains("steps")) cfg.steps = static_cast<int>(integer(j["steps"], where + ".steps"));
    if (j.contains("step_size")) cfg.step_size = num(j["step_size"], where + ".step_size");
    if (j.contains("geometry")) cfg.geometry = parse_geometry(j["geometry"], where + ".geometry");
    if (j.contains("random_start")) cfg.random_start = j["random_start"].get<bool>();
    return cfg;
}

PenaltySpec parse_penalty(const json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("kind")) config_fail(where, "penalty needs a 'kind'");
    std::string kind = text(j["kind"], where + ".kind");
    PenaltySpec p;
    if (kind == "weight_decay") {
        require_keys(j, where, {"kind", "lambda"});
        p = PenaltySpec::weight_decay(num(j.at("lambda"), where));
    } else if (kind == "sn_penalty") {
        require_keys(j, where, {"kind", "lambda", "method", "iterations"});
        SnMethod m;
        if (j.contains("method")) {
            std::string mm = text(j["method"], where + ".method");
            if (mm == "svd")
                m.kind = SnMethod::Kind::svd;
            else if (mm == "power")
                m.kind = SnMethod::Kind::power;
            else
                config_fail(where, "sn_penalty method must be 'svd' or 'power'");
        }
        if (j.contains("iterations")) m.iterations = static_cast<int>(integer(j["iterations"], where));
        p = PenaltySpec::sn_penalty(num(j.at("lambda"), where), m);
    } else if (kind == "sn_project") {
        require_keys(j, where, {"kind", "tau", "kappa"});
        double kappa = j.contains("kappa") ? num(j["kappa"], where) : 2.0;
        p = PenaltySpec::sn_project(num(j.at("tau"), where), kappa);
    } else if (kind == "adv") {
        require_keys(j, where,
                     {"kind", "lambda", "epsilon", "steps", "step_size", "geometry", "squared", "random_start",
                      "ramp_epochs"});
        p = PenaltySpec::adv(num(j.at("lambda"), where), parse_attack(j, where, 5));
        if (j.contains("squared")) p.squared = j["squared"].get<bool>();
        if (j.contains("ramp_epochs")) p.ramp_epochs = num(j["ramp_epochs"], where + ".ramp_epochs");
    } else if (kind == "grad_norm") {
        require_keys(j, where, {"kind", "lambda", "geometry"});
        Geometry g = j.contains("geometry") ? parse_geometry(j["geometry"], where) : Geometry::l2;
        p = PenaltySpec::grad_norm(num(j.at("lambda"), where), g);
    } else if (kind == "loss_grad") {
        require_keys(j, where, {"kind", "lambda", "geometry"});
        Geometry g = j.contains("geometry") ? parse_geometry(j["geometry"], where) : Geometry::l2;
        p = PenaltySpec::loss_grad(num(j.at("lambda"), where), g);
    } else if (kind == "pgd_robust") {
        require_keys(j, where, {"kind", "epsilon", "steps", "step_size", "geometry", "random_start", "ramp_epochs"});
        p = PenaltySpec::pgd_robust(parse_attack(j, where, 5));
        if (j.contains("ramp_epochs")) p.ramp_epochs = num(j["ramp_epochs"], where + ".ramp_epochs");
    } else if (kind == "deform_adv") {
        require_keys(j, where, {"kind", "lambda", "m", "family"});
        DeformFamily fam = parse_family(j.at("family"), where + ".family");
        int m = j.contains("m") ? static_cast<int>(integer(j["m"], where)) : 32;
        p = PenaltySpec::deform_adv(num(j.at("lambda"), where), fam, m);
    } else if (kind == "tangent_prop") {
        require_keys(j, where, {"kind", "lambda", "q", "family"});
        DeformFamily fam = parse_family(j.at("family"), where + ".family");
        int q = j.contains("q") ? static_cast<int>(integer(j["q"], where)) : 30;
        p = PenaltySpec::tangent_prop(num(j.at("lambda"), where), fam, q);
    } else {
        config_fail(where, "unknown penalty kind '" + kind + "'");
    }
    return p;
}

NetworkSpec parse_model(const json& j, const std::string& where, std::string& desc) {
    require_keys(j, where,
                 {"preset", "hidden", "channels", "hw", "classes", "activation", "beta", "length", "alphabet",
                  "in_dim"});
    std::string preset = text(j.at("preset"), where + ".preset");
    bool softplus = false;
    double beta = 10.0;
    if (j.contains("activation")) {
        std::string a = text(j["activation"], where + ".activation");
        if (a == "softplus")
            softplus = true;
        else if (a != "relu")
            config_fail(where, "activation must be 'relu' or 'softplus'");
    }
    if (j.contains("beta")) beta = num(j["beta"], where + ".beta");
    std::int64_t classes = j.contains("classes") ? integer(j["classes"], where) : 10;
    desc = preset;
    if (preset == "linear") {
        return preset_linear(integer(j.at("in_dim"), where + ".in_dim"), classes);
    }
    if (preset == "mlp") {
        std::vector<std::int64_t> hidden;
        if (j.contains("hidden"))
            for (const auto& h : j["hidden"]) hidden.push_back(integer(h, where + ".hidden"));
        return preset_mlp(integer(j.at("in_dim"), where + ".in_dim"), hidden, classes, softplus, beta);
    }
    std::int64_t channels = j.contains("channels") ? integer(j["channels"], where) : 4;
    if (preset == "conv-small") {
        std::int64_t hw = j.contains("hw") ? integer(j["hw"], where) : 16;
        return preset_conv_small(hw, channels, classes, softplus, beta);
    }
    if (preset == "mnist-vgg") {
        std::int64_t hw = j.contains("hw") ? integer(j["hw"], where) : 28;
        return preset_mnist_vgg(hw, channels, classes, softplus, beta);
    }
    if (preset == "seq-conv") {
        std::int64_t length = j.contains("length") ? integer(j["length"], where) : 64;
        std::int64_t alphabet = j.contains("alphabet") ? integer(j["alphabet"], where) : 20;
        return preset_seq_conv(alphabet, length, channels, classes);
    }
    config_fail(where, "unknown model preset '" + preset + "'");
}

void apply_override(json& root, const std::string& key, const std::string& value) {
    std::vector<std::string> parts;
    std::stringstream ss(key);
    std::string tok;
    while (std::getline(ss, tok, '.')) parts.push_back(tok);
    check(!parts.empty(), Error::Kind::config, "override: empty key");

    json* cur = &root;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        const std::string& p = parts[i];
        if (cur->is_array()) {
            char* end = nullptr;
            long idx = std::strtol(p.c_str(), &end, 10);
            if (end == p.c_str() || *end) config_fail("--set " + key, "array index expected at '" + p + "'");
            if (idx < 0 || idx >= static_cast<long>(cur->size()))
                config_fail("--set " + key, "array index " + p + " out of range");
            cur = &(*cur)[static_cast<std::size_t>(idx)];
        } else if (cur->is_object()) {
            cur = &(*cur)[p];
        } else {
            config_fail("--set " + key, "cannot descend into '" + p + "'");
        }
    }
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (...) {
        parsed = value;  // plain string
    }
    const std::string& last = parts.back();
    if (cur->is_array()) {
        char* end = nullptr;
        long idx = std::strtol(last.c_str(), &end, 10);
        if (end == last.c_str() || *end || idx < 0 || idx >= static_cast<long>(cur->size()))
            config_fail("--set " + key, "bad array index '" + last + "'");
        (*cur)[static_cast<std::size_t>(idx)] = parsed;
    } else {
        (*cur)[last] = parsed;
    }
}

RunConfig parse_run_config_json(const json& j);

}  // namespace

RunConfig parse_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    check(in.good(), Error::Kind::config, "config: cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw_config("config: " + path + ": " + e.what());
    }
    for (const std::string& ov : overrides) {
        auto eq = ov.find('=');
        check(eq != std::string::npos, Error::Kind::config, "--set expects key=value, got '" + ov + "'");
        apply_override(j, ov.substr(0, eq), ov.substr(eq + 1));
    }
    return parse_run_config_json(j);
}

namespace {

RunConfig parse_run_config_json(const json& j) {
    require_keys(j, "top level", {"seed", "output_dir", "dataset", "model", "loss", "train", "eval", "grid"});
    RunConfig cfg;
    if (j.contains("seed")) cfg.seed = static_cast<std::uint64_t>(integer(j["seed"], "seed"));
    if (j.contains("output_dir")) cfg.output_dir = text(j["output_dir"], "output_dir");

    // dataset
    {
        const json& d = j.at("dataset");
        require_keys(d, "dataset",
                     {"kind", "n", "separation", "length", "alphabet", "motif_length", "images", "labels", "train",
                      "val", "test", "augment_mutate_p"});
        cfg.dataset_kind = text(d.at("kind"), "dataset.kind");
        if (d.contains("n")) cfg.dataset_n = integer(d["n"], "dataset.n");
        if (d.contains("separation")) cfg.synth.separation = num(d["separation"], "dataset.separation");
        if (d.contains("length")) cfg.synth.length = integer(d["length"], "dataset.length");
        if (d.contains("alphabet")) cfg.synth.alphabet = integer(d["alphabet"], "dataset.alphabet");
        if (d.contains("motif_length")) cfg.synth.motif_length = integer(d["motif_length"], "dataset.motif_length");
        if (d.contains("images")) cfg.idx_images = text(d["images"], "dataset.images");
        if (d.contains("labels")) cfg.idx_labels = text(d["labels"], "dataset.labels");
        if (d.contains("train")) cfg.split_train = integer(d["train"], "dataset.train");
        if (d.contains("val")) cfg.split_val = integer(d["val"], "dataset.val");
        if (d.contains("test")) cfg.split_test = integer(d["test"], "dataset.test");
        if (d.contains("augment_mutate_p")) cfg.augment_mutate_p = num(d["augment_mutate_p"], "dataset.augment_mutate_p");
    }

    cfg.model = parse_model(j.at("model"), "model", cfg.model_desc);
    if (j.contains("loss")) cfg.loss = loss_from_name(text(j["loss"], "loss"));

    // train
    if (j.contains("train")) {
        const json& t = j.at("train");
        require_keys(t, "train",
                     {"optimizer", "lr", "momentum", "epochs", "batch_size", "lr_halve_every", "penalties",
                      "augment_deform", "augment_family"});
        if (t.contains("optimizer")) {
            std::string o = text(t["optimizer"], "train.optimizer");
            if (o == "sgd")
                cfg.train.optimizer = TrainConfig::Optimizer::sgd;
            else if (o == "adam") {
                cfg.train.optimizer = TrainConfig::Optimizer::adam;
                cfg.train.lr = 0.01;
            } else
                config_fail("train.optimizer", "must be 'sgd' or 'adam'");
        }
        if (t.contains("lr")) cfg.train.lr = num(t["lr"], "train.lr");
        if (t.contains("momentum")) cfg.train.momentum = num(t["momentum"], "train.momentum");
        if (t.contains("epochs")) cfg.train.epochs = static_cast<int>(integer(t["epochs"], "train.epochs"));
        if (t.contains("batch_size")) cfg.train.batch_size = integer(t["batch_size"], "train.batch_size");
        if (t.contains("lr_halve_every"))
            cfg.train.lr_halve_every = static_cast<int>(integer(t["lr_halve_every"], "train.lr_halve_every"));
        if (t.contains("penalties")) {
            if (!t["penalties"].is_array()) config_fail("train.penalties", "expected an array");
            int i = 0;
            for (const auto& pj : t["penalties"])
                cfg.train.penalties.push_back(parse_penalty(pj, "train.penalties." + std::to_string(i++)));
        }
        if (t.contains("augment_deform")) cfg.train.augment_deform = t["augment_deform"].get<bool>();
        if (t.contains("augment_family"))
            cfg.train.augment_family = parse_family(t["augment_family"], "train.augment_family");
    }
    cfg.train.seed = cfg.seed;
    cfg.train.loss = cfg.loss;
    cfg.train.augment_mutate_p = cfg.augment_mutate_p;

    // eval
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        require_keys(e, "eval",
                     {"epsilons", "steps", "geometry", "split", "sample", "norm_epsilon", "margin_proxy"});
        if (e.contains("epsilons")) {
            cfg.eval_epsilons.clear();
            for (const auto& x : e["epsilons"]) cfg.eval_epsilons.push_back(num(x, "eval.epsilons"));
        }
        if (e.contains("steps")) cfg.eval_steps = static_cast<int>(integer(e["steps"], "eval.steps"));
        if (e.contains("geometry")) cfg.eval_geometry = parse_geometry(e["geometry"], "eval.geometry");
        if (e.contains("split")) {
            cfg.eval_split = text(e["split"], "eval.split");
            if (cfg.eval_split != "train" && cfg.eval_split != "val" && cfg.eval_split != "test")
                config_fail("eval.split", "must be train, val or test");
        }
        if (e.contains("sample")) cfg.eval_sample = integer(e["sample"], "eval.sample");
        if (e.contains("norm_epsilon")) cfg.norm_epsilon = num(e["norm_epsilon"], "eval.norm_epsilon");
        if (e.contains("margin_proxy")) {
            std::string p = text(e["margin_proxy"], "eval.margin_proxy");
            if (p == "f_delta")
                cfg.margin_proxy = MarginProxy::f_delta;
            else if (p == "spectral_product")
                cfg.margin_proxy = MarginProxy::spectral_product;
            else
                config_fail("eval.margin_proxy", "must be f_delta or spectral_product");
        }
    }

    // grid
    if (j.contains("grid")) {
        const json& g = j.at("grid");
        require_keys(g, "grid", {"points"});
        if (!g.contains("points") || !g["points"].is_array() || g["points"].empty())
            config_fail("grid.points", "grid needs a nonempty points array");
        int i = 0;
        for (const auto& pj : g["points"]) {
            std::string where = "grid.points." + std::to_string(i++);
            require_keys(pj, where, {"label", "overrides"});
            RunConfig::GridPointSpec pt;
            pt.label = pj.contains("label") ? text(pj["label"], where + ".label") : ("point" + std::to_string(i - 1));
            if (pj.contains("overrides")) {
                if (!pj["overrides"].is_object()) config_fail(where + ".overrides", "expected an object");
                for (auto it = pj["overrides"].begin(); it != pj["overrides"].end(); ++it)
                    pt.overrides.emplace_back(it.key(), it.value().dump());
            }
            cfg.grid_points.push_back(std::move(pt));
        }
    }
    return cfg;
}

}  // namespace

Dataset build_dataset(const RunConfig& cfg) {
    if (cfg.dataset_kind == "idx-images") {
        check(!cfg.idx_images.empty() && !cfg.idx_labels.empty(), Error::Kind::config,
              "dataset: idx-images needs 'images' and 'labels' paths");
        check(cfg.split_train > 0, Error::Kind::config, "dataset: idx-images needs a positive 'train' size");
        return load_idx_dataset(cfg.idx_images, cfg.idx_labels, cfg.split_train, cfg.split_val, cfg.split_test,
                                cfg.seed);
    }
    Dataset ds = make_synthetic(cfg.dataset_kind, cfg.dataset_n, cfg.seed, cfg.synth);
    if (cfg.split_train > 0) {
        check(cfg.split_train + cfg.split_val + cfg.split_test <= ds.n(), Error::Kind::config,
              "dataset: split sizes exceed n");
        ds.train_idx.clear();
        ds.val_idx.clear();
        ds.test_idx.clear();
        for (std::int64_t i = 0; i < cfg.split_train; ++i) ds.train_idx.push_back(i);
        for (std::int64_t i = 0; i < cfg.split_val; ++i) ds.val_idx.push_back(cfg.split_train + i);
        for (std::int64_t i = 0; i < cfg.split_test; ++i) ds.test_idx.push_back(cfg.split_train + cfg.split_val + i);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// command pipelines

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct CsvWriter {
    std::ofstream out;
    explicit CsvWriter(const std::string& path) : out(path) {
        check(out.good(), Error::Kind::io, "cannot open " + path + " for writing");
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << "\n";
    }
};

void write_metrics_csv(const std::string& path, const TrainRecord& rec, bool has_projection) {
    CsvWriter csv(path);
    std::vector<std::string> penalty_cols;
    if (!rec.epochs.empty())
        for (const auto& [k, v] : rec.epochs.front().penalty_values) penalty_cols.push_back(k);
    std::vector<std::string> header{"epoch", "lr", "loss", "train_acc", "val_acc"};
    for (const auto& k : penalty_cols) header.push_back("pen_" + k);
    std::size_t n_layers = rec.epochs.empty() ? 0 : rec.epochs.front().layer_norms.size();
    for (std::size_t l = 0; l < n_layers; ++l) header.push_back("sigma_" + std::to_string(l + 1));
    if (has_projection) header.push_back("tau");
    csv.row(header);
    for (const auto& ep : rec.epochs) {
        std::vector<std::string> cells{std::to_string(ep.epoch), fmt(ep.lr), fmt(ep.loss), fmt(ep.train_acc),
                                       fmt(ep.val_acc)};
        for (const auto& k : penalty_cols) cells.push_back(fmt(ep.penalty_values.count(k) ? ep.penalty_values.at(k) : 0.0));
        for (double s : ep.layer_norms) cells.push_back(fmt(s));
        if (has_projection) cells.push_back(fmt(ep.tau));
        csv.row(cells);
    }
}

Checkpoint make_checkpoint(const RunConfig& cfg, const ParamSet& params, std::uint64_t step) {
    Checkpoint ck;
    ck.spec_text = spec_to_string(cfg.model);
    ck.params = params;
    ck.step = step;
    std::ostringstream rs;
    Rng root(cfg.seed);
    rs << root.engine();
    ck.rng_state = rs.str();
    return ck;
}

struct TrainOutput {
    Network net;
    ParamSet final_params;
    TrainRecord record;
};

TrainOutput run_training(const RunConfig& cfg, const Dataset& ds, const std::string& outdir) {
    std::filesystem::create_directories(outdir);
    auto [net, params] = build_network(cfg.model, cfg.seed);
    auto [out_params, rec] = train(net, std::move(params), ds, cfg.train);

    bool has_projection = false;
    for (const auto& p : cfg.train.penalties)
        if (p.kind == PenaltySpec::Kind::sn_project) has_projection = true;
    write_metrics_csv(outdir + "/metrics.csv", rec, has_projection);

    save_checkpoint(outdir + "/model.krnr", make_checkpoint(cfg, out_params, static_cast<std::uint64_t>(rec.steps)));
    if (rec.best_epoch >= 0 && !rec.best_params.names.empty())
        save_checkpoint(outdir + "/best_model.krnr",
                        make_checkpoint(cfg, rec.best_params, static_cast<std::uint64_t>(rec.steps)));

    if (rec.diverged)
        throw Error(Error::Kind::divergence,
                    "training diverged; last good checkpoint at " + outdir + "/model.krnr");
    return {std::move(net), std::move(out_params), std::move(rec)};
}

std::pair<Tensor, std::vector<std::int64_t>> eval_subset(const RunConfig& cfg, const Dataset& ds) {
    const std::vector<std::int64_t>* idx = &ds.val_idx;
    if (cfg.eval_split == "train") idx = &ds.train_idx;
    if (cfg.eval_split == "test") idx = &ds.test_idx;
    check(!idx->empty(), Error::Kind::config, "eval: split '" + cfg.eval_split + "' is empty");
    std::vector<std::int64_t> use(idx->begin(),
                                  idx->begin() + std::min<std::int64_t>(cfg.eval_sample,
                                                                        static_cast<std::int64_t>(idx->size())));
    return {ds.gather_inputs(use), ds.gather_labels(use)};
}

ParamSet load_params_for(const RunConfig& cfg, const Network& net) {
    std::string path = cfg.output_dir + "/model.krnr";
    check(std::filesystem::exists(path), Error::Kind::config, path + " not found; run 'kernreg train' first");
    Checkpoint ck = load_checkpoint(path);
    check(ck.params.count() == static_cast<std::size_t>(net.n_param_layers()), Error::Kind::data,
          path + ": parameter count does not match the configured model");
    for (std::size_t i = 0; i < ck.params.count(); ++i)
        check(ck.params.tensors[i].shape == net.param_shapes()[i], Error::Kind::data,
              path + ": parameter " + ck.params.names[i] + " has mismatched shape");
    return ck.params;
}

int cmd_train(const RunConfig& cfg) {
    Dataset ds = build_dataset(cfg);
    run_training(cfg, ds, cfg.output_dir);
    std::printf("train: wrote %s/metrics.csv and %s/model.krnr\n", cfg.output_dir.c_str(), cfg.output_dir.c_str());
    return 0;
}

int cmd_eval_robust(const RunConfig& cfg) {
    Dataset ds = build_dataset(cfg);
    Network net(cfg.model);
    ParamSet params = load_params_for(cfg, net);
    auto [inputs, labels] = eval_subset(cfg, ds);
    auto sweep = robust_accuracy_sweep(net, params, inputs, labels, cfg.loss, cfg.eval_epsilons, cfg.eval_steps,
                                       cfg.eval_geometry);
    std::filesystem::create_directories(cfg.output_dir);
    CsvWriter csv(cfg.output_dir + "/robust.csv");
    csv.row({"epsilon", "steps", "geometry", "accuracy"});
    for (const auto& [eps, acc] : sweep)
        csv.row({fmt(eps), std::to_string(cfg.eval_steps), geometry_name(cfg.eval_geometry), fmt(acc)});
    std::printf("eval-robust: wrote %s/robust.csv\n", cfg.output_dir.c_str());
    return 0;
}

int cmd_norms(const RunConfig& cfg) {
    Dataset ds = build_dataset(cfg);
    Network net(cfg.model);
    ParamSet params = load_params_for(cfg, net);
    // fixed sample of training examples
    std::vector<std::int64_t> use(ds.train_idx.begin(),
                                  ds.train_idx.begin() + std::min<std::int64_t>(cfg.eval_sample,
                                                                                static_cast<std::int64_t>(ds.train_idx.size())));
    NormReport rep = norm_report(net, params, ds.gather_inputs(use), cfg.norm_epsilon, cfg.eval_steps);
    std::filesystem::create_directories(cfg.output_dir);
    CsvWriter csv(cfg.output_dir + "/norms.csv");
    std::vector<std::string> header{"epsilon", "lower", "upper"};
    for (std::size_t k = 0; k < rep.lower_per_class.size(); ++k) header.push_back("lower_class_" + std::to_string(k));
    for (std::size_t l = 0; l < rep.per_layer.size(); ++l) header.push_back("sigma_" + std::to_string(l + 1));
    csv.row(header);
    std::vector<std::string> cells{fmt(rep.epsilon), fmt(rep.lower), fmt(rep.upper)};
    for (double v : rep.lower_per_class) cells.push_back(fmt(v));
    for (double v : rep.per_layer) cells.push_back(fmt(v));
    csv.row(cells);
    check(rep.chain_ok(), Error::Kind::internal, "norm report violates the lower<=upper chain");
    std::printf("norms: lower=%s upper=%s -> %s/norms.csv\n", fmt(rep.lower).c_str(), fmt(rep.upper).c_str(),
                cfg.output_dir.c_str());
    return 0;
}

int cmd_margins(const RunConfig& cfg) {
    Dataset ds = build_dataset(cfg);
    Network net(cfg.model);
    ParamSet params = load_params_for(cfg, net);
    auto [inputs, labels] = eval_subset(cfg, ds);
    NormReport rep = norm_report(net, params, inputs, cfg.norm_epsilon, cfg.eval_steps);
    MarginReport mr = margin_cdf(net, params, inputs, labels, cfg.margin_proxy, rep);
    std::filesystem::create_directories(cfg.output_dir);
    CsvWriter csv(cfg.output_dir + "/margins.csv");
    csv.row({"raw", "normalized", "cdf"});
    for (const auto& r : mr.records) csv.row({fmt(r.raw), fmt(r.normalized), fmt(r.cdf)});
    std::printf("margins: proxy %s = %s -> %s/margins.csv\n", mr.proxy_tag.c_str(), fmt(mr.proxy).c_str(),
                cfg.output_dir.c_str());
    return 0;
}

int cmd_grid(const std::string& config_path, const std::vector<std::string>& overrides, const RunConfig& base) {
    check(!base.grid_points.empty(), Error::Kind::config, "grid: config has no grid.points");
    std::filesystem::create_directories(base.output_dir);
    CsvWriter csv(base.output_dir + "/summary.csv");
    csv.row({"index", "label", "best_val_acc", "best_epoch", "test_acc", "final_train_loss", "diverged"});

    int best = -1;
    double best_val = -1;
    std::vector<std::string> labels;
    for (std::size_t gi = 0; gi < base.grid_points.size(); ++gi) {
        const auto& pt = base.grid_points[gi];
        std::vector<std::string> ovr = overrides;
        for (const auto& [k, v] : pt.overrides) ovr.push_back(k + "=" + v);
        RunConfig cfg = parse_run_config(config_path, ovr);
        cfg.output_dir = base.output_dir + "/grid_" + std::to_string(gi);
        cfg.grid_points.clear();

        Dataset ds = build_dataset(cfg);
        TrainOutput out = run_training(cfg, ds, cfg.output_dir);
        double test_acc = 0;
        if (!ds.test_idx.empty())
            test_acc = accuracy(out.net, out.record.best_params, ds.gather_inputs(ds.test_idx),
                                ds.gather_labels(ds.test_idx));
        csv.row({std::to_string(gi), pt.label, fmt(out.record.best_val_acc), std::to_string(out.record.best_epoch),
                 fmt(test_acc), fmt(out.record.epochs.empty() ? 0.0 : out.record.epochs.back().loss),
                 out.record.diverged ? "1" : "0"});
        labels.push_back(pt.label);
        if (out.record.best_val_acc > best_val) {
            best_val = out.record.best_val_acc;
            best = static_cast<int>(gi);
        }
    }
    std::printf("grid: best point %d (%s) with validation accuracy %s; table in %s/summary.csv\n", best,
                best >= 0 ? labels[static_cast<std::size_t>(best)].c_str() : "-", fmt(best_val).c_str(),
                base.output_dir.c_str());
    return 0;
}

}  // namespace

int run_command(const std::string& command, const std::string& config_path,
                const std::vector<std::string>& overrides) {
    RunConfig cfg = parse_run_config(config_path, overrides);
    if (command == "train") return cmd_train(cfg);
    if (command == "eval-robust") return cmd_eval_robust(cfg);
    if (command == "norms") return cmd_norms(cfg);
    if (command == "margins") return cmd_margins(cfg);
    if (command == "grid") return cmd_grid(config_path, overrides, cfg);
    throw_config("unknown command '" + command + "'");
}

}  // namespace kernreg
