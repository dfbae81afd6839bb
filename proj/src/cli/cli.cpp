#include "mmld/cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "mmld/metrics.hpp"
#include "mmld/service.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#include "httplib.h"

namespace mmld::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

json read_json_file(const fs::path& p) {
    const auto bytes = io::read_file(p);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw UsageError("config " + p.string() + " is not valid JSON: " + e.what());
    }
}

// Every key of `patch` must exist in `known`, recursively through objects.
void check_keys(const json& patch, const json& known, const std::string& where) {
    if (!patch.is_object()) throw UsageError(where + " must be a JSON object");
    for (const auto& [k, v] : patch.items()) {
        if (!known.contains(k)) throw UsageError("unknown config key " + where + "." + k);
        if (v.is_object() && known.at(k).is_object()) check_keys(v, known.at(k), where + "." + k);
    }
}

bool same_generator(const toygen::ToyGenConfig& a, const toygen::ToyGenConfig& b) { return io::to_json(a) == io::to_json(b); }

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

// --- gen-dataset ---------------------------------------------------------------

struct GenArgs {
    std::string out, config;
    std::size_t count = 0;
    std::uint64_t seed = 0;
};

int gen_dataset(const GenArgs& a, std::ostream& out) {
    toygen::ToyGenConfig g;
    if (!a.config.empty()) {
        const auto j = read_json_file(a.config);
        const json& gj = j.contains("gen") ? j.at("gen") : j;
        check_keys(gj, io::to_json(toygen::ToyGenConfig{}), "gen");
        g = io::gen_config_from_json(gj);
    }
    g.validate();
    if (g.frozen_dims != 0) throw UsageError("frozen_dims is not stored in dataset files; use 0");
    const toygen::ToyGenerator gen(g);
    const auto records = gen.build_dataset(a.count, a.seed);
    io::write_dataset(a.out, g, records);

    std::vector<double> attr_mean(static_cast<std::size_t>(g.n_attr)), class_frac(toygen::kNumClasses);
    for (const auto& r : records) {
        for (std::size_t i = 0; i < attr_mean.size(); ++i) attr_mean[i] += r.attrs[i] / static_cast<double>(records.size());
        for (auto l : r.seg) class_frac[l] += 1.0 / static_cast<double>(records.size() * r.seg.size());
    }
    out << "wrote " << records.size() << " records to " << a.out << " (" << fs::file_size(a.out) << " bytes)\n";
    out << "latent " << g.k << "x" << g.d << ", image " << g.image_size << "x" << g.image_size << ", generator seed " << g.seed
        << ", dataset seed " << a.seed << "\n";
    const auto names = toygen::attribute_names(g.n_attr);
    out << "mean attributes:";
    for (std::size_t i = 0; i < names.size(); ++i) out << ' ' << names[i] << '=' << fmt(attr_mean[i], 3);
    out << "\nclass pixel fractions:";
    for (std::size_t c = 0; c < class_frac.size(); ++c) out << ' ' << toygen::class_names()[c] << '=' << fmt(class_frac[c], 3);
    out << '\n';
    return 0;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
    std::string data, config, out, resume, log;
    long checkpoint_every = 500, stop_after = 0;
    std::optional<long> steps;
    std::optional<int> batch;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    std::uint64_t model_seed = 1;
};

void save_checkpoint(const fs::path& path, const io::Checkpoint& ck) {
    const fs::path tmp = path.string() + ".tmp";
    io::write_checkpoint(tmp, ck);
    fs::rename(tmp, path);
}

// Keeps log lines up to `step` so a resumed run continues a consistent log.
void trim_log(const fs::path& path, long step) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::string line, kept;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        if (std::stol(line.substr(0, comma)) <= step) kept += line + '\n';
    }
    in.close();
    io::write_text(path, kept);
}

int train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    const auto ds = io::read_dataset(a.data);
    const auto gen = ds.header.generator_config();
    std::unique_ptr<diffusion::DiffusionModel> model;
    diffusion::TrainConfig tc;
    std::uint64_t init_seed = a.model_seed;
    std::optional<io::Checkpoint> ck;

    if (!a.resume.empty()) {
        if (a.steps || a.batch || a.lr || a.seed || !a.config.empty())
            throw UsageError("--resume continues the stored schedule; --config and training overrides are not allowed");
        ck = io::read_checkpoint(a.resume);
        if (!ck->train || !ck->adam) throw io::FormatError(a.resume + " has no optimizer state to resume from");
        if (!same_generator(ck->config.gen, gen)) throw UsageError("dataset generator does not match the checkpoint");
        tc = *ck->train;
        init_seed = ck->init_seed;
        model = io::instantiate(*ck);
    } else {
        const json cfg = a.config.empty() ? json::object() : read_json_file(a.config);
        json mj = io::to_json(diffusion::ModelConfig::make(gen));
        if (cfg.contains("model")) {
            check_keys(cfg.at("model"), mj, "model");
            mj.merge_patch(cfg.at("model"));
        }
        if (cfg.contains("train")) check_keys(cfg.at("train"), io::to_json(diffusion::TrainConfig{}), "train");
        const auto mc = io::model_config_from_json(mj);
        if (!same_generator(mc.gen, gen)) throw UsageError("model generator config disagrees with the dataset header");
        if (cfg.contains("train")) tc = io::train_config_from_json(cfg.at("train"));
        if (a.steps) tc.steps = *a.steps;
        if (a.batch) tc.batch = *a.batch;
        if (a.lr) tc.max_lr = *a.lr;
        if (a.seed) tc.seed = *a.seed;
        model = std::make_unique<diffusion::DiffusionModel>(mc, init_seed);
    }
    tc.validate();

    diffusion::Trainer trainer(*model, ds.records, tc);
    const fs::path log = a.log.empty() ? fs::path(a.out + ".log") : fs::path(a.log);
    if (ck) {
        if (!(model->norm.min.vec() == ck->norm.min.vec() && model->norm.max.vec() == ck->norm.max.vec()))
            throw UsageError("dataset differs from the one the checkpoint was trained on");
        trainer.restore(*ck->adam, ck->step);
        trim_log(log, ck->step);
    } else {
        io::write_text(log, "");
    }
    std::ofstream logf(log, std::ios::app);
    if (!logf) throw io::IoError("cannot open metrics log " + log.string());

    out << "training " << model->params().count_scalars() << " parameters on " << ds.records.size() << " records, steps "
        << trainer.completed_steps() << " -> " << tc.steps << "\n";
    auto save = [&] { save_checkpoint(a.out, io::capture(*model, init_seed, trainer.completed_steps(), &tc, &trainer.adam())); };
    const auto t0 = std::chrono::steady_clock::now();
    try {
        while (!trainer.done() && !(a.stop_after > 0 && trainer.completed_steps() >= a.stop_after)) {
            const auto st = trainer.step();
            logf << diffusion::log_line(st) << '\n';
            logf.flush();
            if (st.step % 100 == 0 || trainer.done())
                out << "step " << st.step << " loss " << fmt(st.loss) << " lr " << st.lr << " ("
                    << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1) << " s)\n";
            if (a.checkpoint_every > 0 && st.step % a.checkpoint_every == 0) save();
        }
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "; last checkpoint left in place\n";
        return 1;
    }
    save();
    out << "saved " << a.out << " at step " << trainer.completed_steps() << "\n";
    return 0;
}

// --- sample / edit -------------------------------------------------------------

struct ConditionArgs {
    std::string rgb, seg, rgb_mask, seg_mask, attr_file;
    std::vector<std::string> attrs;
};

void add_condition_options(CLI::App* c, ConditionArgs& a, const std::string& prefix, const std::string& what) {
    c->add_option("--" + prefix + "rgb", a.rgb, what + " RGB condition (PPM)");
    c->add_option("--" + prefix + "seg", a.seg, what + " segmentation condition (PGM, labels x40)");
    c->add_option("--" + prefix + "rgb-mask", a.rgb_mask, what + " RGB validity mask (PGM, 0 = masked)");
    c->add_option("--" + prefix + "seg-mask", a.seg_mask, what + " segmentation validity mask (PGM, 0 = masked)");
    c->add_option("--" + prefix + "attr", a.attrs, what + " attribute name=value (repeatable)");
    c->add_option("--" + prefix + "attr-file", a.attr_file, what + " attribute file, one name=value per line");
}

service::ConditionInputs load_inputs(const ConditionArgs& a) {
    service::ConditionInputs in;
    if (!a.rgb.empty()) in.rgb = io::read_pnm(a.rgb);
    if (!a.seg.empty()) {
        in.seg = io::read_pnm(a.seg);
        try {
            in.seg->data = io::gray_to_seg(in.seg->data);
        } catch (const std::exception& e) {
            throw service::ValidationError(a.seg + ": " + e.what());
        }
    }
    if (!a.rgb_mask.empty()) in.rgb_mask = io::read_pnm(a.rgb_mask);
    if (!a.seg_mask.empty()) in.seg_mask = io::read_pnm(a.seg_mask);
    if (!a.attr_file.empty()) in.attrs = service::read_attr_file(a.attr_file);
    for (const auto& s : a.attrs) {
        const auto [name, v] = service::parse_attr_assignment(s);
        in.attrs[name] = v;
    }
    return in;
}

json describe_inputs(const ConditionArgs& a) {
    auto path = [](const std::string& s) { return s.empty() ? json(nullptr) : json(s); };
    json attrs = json::object();
    for (const auto& [k, v] : load_inputs(a).attrs) attrs[k] = v;
    return json{{"rgb", path(a.rgb)}, {"seg", path(a.seg)}, {"rgb_mask", path(a.rgb_mask)}, {"seg_mask", path(a.seg_mask)}, {"attrs", attrs}};
}

struct SampleArgs {
    std::string ckpt, out;
    ConditionArgs cond, ref;
    double omega_v = 1.0, omega_a = 1.0, eta = 0.0;
    int steps = 100, count = 1, t_rec = 0;
    std::uint64_t seed = 0;
    std::vector<double> view;
};

toygen::ViewParams parse_view(const std::vector<double>& v) {
    toygen::ViewParams p;
    if (v.empty()) return p;
    if (v.size() != 5) throw UsageError("--view takes fov,yaw,pitch,roll,radius");
    p.fov = v[0];
    p.yaw = v[1];
    p.pitch = v[2];
    p.roll = v[3];
    p.radius = v[4];
    return p;
}

int sample(const SampleArgs& a, bool edit, std::ostream& out) {
    diffusion::SampleConfig sc;
    sc.ddim_steps = a.steps;
    sc.eta = a.eta;
    sc.omega_v = a.omega_v;
    sc.omega_a = a.omega_a;
    sc.seed = a.seed;
    sc.noise_seed = derive_seed(a.seed, 1);
    if (edit && (a.t_rec < 0 || a.t_rec > a.steps)) throw UsageError("--t-rec must be in [0, --steps]");
    const auto view = parse_view(a.view);

    const auto ck = io::read_checkpoint(a.ckpt);
    const auto model = io::instantiate(ck);
    const auto& g = ck.config.gen;
    sc.validate(ck.config.timesteps);
    const auto conds = service::build_conditions(load_inputs(a.cond), g.n_attr, g.image_size);
    const std::vector<diffusion::Conditions> batch(static_cast<std::size_t>(a.count), conds);

    const auto t0 = std::chrono::steady_clock::now();
    diffusion::SampleResult res;
    if (edit) {
        diffusion::EditPlan plan;
        plan.reference.assign(batch.size(), service::build_conditions(load_inputs(a.ref), g.n_attr, g.image_size));
        plan.edit = batch;
        plan.t_rec = a.t_rec;
        plan.sample = sc;
        res = diffusion::edit(*model, plan);
    } else {
        res = diffusion::ddim_sample(*model, batch, sc);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const fs::path dir(a.out);
    fs::create_directories(dir);
    const toygen::ToyGenerator gen(g);
    const auto names = toygen::attribute_names(g.n_attr);
    json manifest{{"command", edit ? "edit" : "sample"}, {"checkpoint", a.ckpt}, {"checkpoint_step", ck.step}, {"seed", a.seed},
                  {"steps", a.steps}, {"eta", a.eta}, {"omega_v", a.omega_v}, {"omega_a", a.omega_a}, {"count", a.count},
                  {"seconds_per_sample", secs / a.count}, {"conditions", describe_inputs(a.cond)}};
    if (edit) {
        manifest["t_rec"] = a.t_rec;
        manifest["reference"] = describe_inputs(a.ref);
    }
    json samples = json::array();
    for (std::size_t i = 0; i < res.latents.size(); ++i) {
        std::ostringstream stem;
        stem << "sample_" << std::setw(3) << std::setfill('0') << i;
        const auto s = service::describe(gen, res.latents[i], view);
        io::write_latent(dir / (stem.str() + ".lat"), res.latents[i], {{"index", i}});
        io::write_ppm(dir / (stem.str() + ".ppm"), toygen::quantize(s.render.rgb), s.render.size, s.render.size);
        io::write_pgm(dir / (stem.str() + "_seg.pgm"), io::seg_to_gray(s.render.seg), s.render.size, s.render.size);
        json attrs = json::object();
        for (std::size_t j = 0; j < names.size(); ++j) attrs[names[j]] = s.attrs[j];
        samples.push_back({{"index", i}, {"sample_seed", derive_seed(a.seed, i)}, {"latent", stem.str() + ".lat"},
                           {"image", stem.str() + ".ppm"}, {"seg", stem.str() + "_seg.pgm"}, {"measured_attrs", attrs}});
    }
    manifest["samples"] = samples;
    io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    out << "wrote " << res.latents.size() << " samples to " << dir.string() << " (" << fmt(secs / a.count, 3) << " s per sample)\n";
    return 0;
}

// --- predictors shared by eval and baseline ------------------------------------

std::vector<toygen::DatasetRecord> reference_records(const std::string& data, const toygen::ToyGenConfig& g, std::uint64_t seed,
                                                     std::ostream& err) {
    if (!data.empty()) {
        auto ds = io::read_dataset(data);
        if (!same_generator(ds.header.generator_config(), g)) throw UsageError("dataset generator does not match the checkpoint");
        return std::move(ds.records);
    }
    err << "note: no --data given; generating 2000 reference records from the checkpoint's generator\n";
    return toygen::ToyGenerator(g).build_dataset(2000, derive_seed(seed, 0xda7a));
}

baseline::TrainedPredictors predictors_for(const std::string& path, const toygen::ToyGenConfig& g,
                                           const std::vector<toygen::DatasetRecord>& records, std::ostream& out, std::ostream& err) {
    if (fs::exists(path)) {
        auto p = baseline::read_predictors(path);
        if (p.net->config().image_size != g.image_size || p.net->config().n_attr != g.n_attr)
            throw UsageError(path + " was trained for a different image size or attribute count");
        return p;
    }
    err << "warning: predictors " << path << " not found; training them now (this takes a few minutes)\n";
    baseline::PredictorConfig pc;
    pc.image_size = g.image_size;
    pc.n_attr = g.n_attr;
    auto p = baseline::train_predictors(records, pc);
    baseline::write_predictors(path, *p.net, p.heldout);
    out << "trained predictors: held-out attribute MAE " << fmt(p.heldout.attr_mae) << ", pixel accuracy "
        << fmt(p.heldout.pixel_accuracy) << "; saved to " << path << "\n";
    return p;
}

std::string default_predictors(const std::string& ckpt) { return (fs::path(ckpt).parent_path() / "predictors.bin").string(); }

// --- eval ----------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt, task = "face-rgb", data, predictors, out = "eval";
    std::size_t count = 16;
    std::uint64_t seed = 0;
    int steps = 100, iterations = 400;
    double omega_v = 1.0, omega_a = 1.0, baseline_lr = 0.05;
};

int eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const auto task = metrics::parse_task(a.task);
    const auto ck = io::read_checkpoint(a.ckpt);
    const auto model = io::instantiate(ck);
    const auto& g = ck.config.gen;
    const toygen::ToyGenerator gen(g);
    const auto records = reference_records(a.data, g, a.seed, err);
    const auto preds = predictors_for(a.predictors.empty() ? default_predictors(a.ckpt) : a.predictors, g, records, out, err);
    baseline::Inverter inverter(gen, model->norm, preds.net.get());
    inverter.set_mean_latent(baseline::mean_normalized_latent(records, model->norm));

    metrics::EvalSetup setup;
    setup.task = task;
    setup.count = a.count;
    setup.seed = a.seed;
    setup.sample.ddim_steps = a.steps;
    setup.sample.omega_v = a.omega_v;
    setup.sample.omega_a = a.omega_a;
    setup.baseline.iterations = a.iterations;
    setup.baseline.lr = a.baseline_lr;
    const auto pair = metrics::eval_suite(*model, inverter, *preds.net, setup);

    const fs::path dir(a.out);
    fs::create_directories(dir);
    const std::string stem = task == metrics::Task::FaceRgbHairSegHairAttr ? "face-rgb" : "half-rgb";
    for (const auto* r : {&pair.diffusion, &pair.baseline}) {
        io::write_text(dir / (stem + "_" + r->method + ".json"), r->to_json().dump(2) + "\n");
        io::write_text(dir / (stem + "_" + r->method + ".csv"), r->to_csv());
    }
    out << "task " << pair.diffusion.task << ", " << a.count << " samples, config " << pair.diffusion.config_hash << "\n";
    out << std::left << std::setw(20) << "metric" << std::setw(14) << "diffusion" << "baseline\n";
    for (const auto& m : pair.diffusion.metric_names)
        out << std::setw(20) << m << std::setw(14) << fmt(pair.diffusion.means.at(m)) << fmt(pair.baseline.means.at(m)) << "\n";
    out << "reports written to " << dir.string() << "\n";
    return 0;
}

// --- baseline ------------------------------------------------------------------

struct BaselineArgs {
    std::string ckpt, data, predictors, out = "baseline", init = "mean";
    ConditionArgs cond;
    double lambda_attr = 1.0, lambda_seg = 1.0, lr = 0.05;
    int iterations = 400;
    std::uint64_t seed = 0;
    std::vector<double> view;
};

int run_baseline(const BaselineArgs& a, std::ostream& out, std::ostream& err) {
    const auto ck = io::read_checkpoint(a.ckpt);
    const auto& g = ck.config.gen;
    const toygen::ToyGenerator gen(g);
    const auto inputs = load_inputs(a.cond);
    if (inputs.empty()) throw UsageError("give at least one of --rgb, --seg or --attr");
    const auto c = service::build_conditions(inputs, g.n_attr, g.image_size);
    auto target = baseline::InversionTarget::from_conditions(c.visual, c.attrs, parse_view(a.view));

    baseline::BaselineConfig bc;
    bc.lambda_attr = a.lambda_attr;
    bc.lambda_seg = a.lambda_seg;
    bc.lr = a.lr;
    bc.iterations = a.iterations;
    bc.seed = a.seed;
    bc.init = a.init == "zero" ? baseline::InitMode::Zero : a.init == "random" ? baseline::InitMode::Random : baseline::InitMode::Mean;

    const auto records = reference_records(a.data, g, a.seed, err);
    const bool needs_predictors = (inputs.seg && a.lambda_seg > 0) || (!inputs.attrs.empty() && a.lambda_attr > 0);
    std::optional<baseline::TrainedPredictors> preds;
    if (needs_predictors) preds = predictors_for(a.predictors.empty() ? default_predictors(a.ckpt) : a.predictors, g, records, out, err);
    baseline::Inverter inv(gen, ck.norm, preds ? preds->net.get() : nullptr);
    inv.set_mean_latent(baseline::mean_normalized_latent(records, ck.norm));
    const auto res = needs_predictors || !inputs.rgb ? inv.multi_conditional_invert(target, bc)
                                                     : inv.invert(target.rgb, target.rgb_valid, target.view, bc);

    const fs::path dir(a.out);
    fs::create_directories(dir);
    std::ostringstream csv;
    csv << std::setprecision(9) << "iteration,loss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i) csv << i << ',' << res.losses[i] << '\n';
    io::write_text(dir / "losses.csv", csv.str());
    io::write_latent(dir / "latent.lat", res.latent, {{"best_iteration", res.best_iteration}});
    const auto s = service::describe(gen, res.latent, target.view);
    io::write_ppm(dir / "render.ppm", toygen::quantize(s.render.rgb), s.render.size, s.render.size);
    io::write_pgm(dir / "render_seg.pgm", io::seg_to_gray(s.render.seg), s.render.size, s.render.size);
    json attrs = json::object();
    const auto names = toygen::attribute_names(g.n_attr);
    for (std::size_t j = 0; j < names.size(); ++j) attrs[names[j]] = s.attrs[j];
    const json summary{{"initial_loss", res.losses.front()}, {"best_loss", res.best_loss}, {"best_iteration", res.best_iteration},
                       {"iterations", a.iterations}, {"seconds", res.seconds}, {"measured_attrs", attrs}, {"conditions", describe_inputs(a.cond)}};
    io::write_text(dir / "result.json", summary.dump(2) + "\n");
    out << "loss " << res.losses.front() << " -> " << res.best_loss << " (best at iteration " << res.best_iteration << ", "
        << fmt(res.seconds, 2) << " s); outputs in " << dir.string() << "\n";
    return 0;
}

// --- serve ---------------------------------------------------------------------

struct ServeArgs {
    std::string ckpt, host = "127.0.0.1";
    int port = 8080;
    service::ServiceConfig cfg;
};

int serve(const ServeArgs& a, std::ostream& out) {
    if (!fs::exists(a.ckpt)) throw io::IoError("checkpoint " + a.ckpt + " does not exist");
    service::Service svc(a.cfg);
    svc.load_async(a.ckpt);
    httplib::Server server;
    svc.mount(server);
    out << "serving " << a.ckpt << " on http://" << a.host << ":" << a.port << "\n" << std::flush;
    if (!server.listen(a.host, a.port)) throw io::IoError("cannot listen on " + a.host + ":" + std::to_string(a.port));
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-modal conditional latent diffusion on a toy face generator"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen-dataset", "Render a deterministic toy dataset file");
    g->add_option("--out", gen.out, "Output dataset path")->required();
    g->add_option("--count", gen.count, "Number of records")->required()->check(CLI::PositiveNumber);
    g->add_option("--seed", gen.seed, "Dataset seed");
    g->add_option("--config", gen.config, "JSON generator config")->check(CLI::ExistingFile);

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train the conditional denoiser");
    t->add_option("--data", tr.data, "Dataset file")->required()->check(CLI::ExistingFile);
    t->add_option("--config", tr.config, "JSON file with optional \"model\" and \"train\" objects")->check(CLI::ExistingFile);
    t->add_option("--out", tr.out, "Checkpoint path (rewritten at every checkpoint)")->required();
    t->add_option("--resume", tr.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    t->add_option("--log", tr.log, "Metrics log (step,loss,lr); default <out>.log");
    t->add_option("--checkpoint-every", tr.checkpoint_every, "Steps between checkpoints (0 = only at the end)")->check(CLI::NonNegativeNumber);
    t->add_option("--stop-after", tr.stop_after, "Stop once this many steps are complete")->check(CLI::NonNegativeNumber);
    t->add_option("--steps", tr.steps, "Total training steps")->check(CLI::PositiveNumber);
    t->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
    t->add_option("--lr", tr.lr, "Maximum learning rate")->check(CLI::PositiveNumber);
    t->add_option("--seed", tr.seed, "Training seed");
    t->add_option("--model-seed", tr.model_seed, "Weight initialisation seed");

    SampleArgs sa;
    auto* s = app.add_subcommand("sample", "Draw conditional samples");
    auto* e = app.add_subcommand("edit", "Two-stage editing: reference conditions first, then edit conditions");
    for (auto* c : {s, e}) {
        c->add_option("--ckpt", sa.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
        c->add_option("--out", sa.out, "Output directory")->required();
        add_condition_options(c, sa.cond, "", c == e ? "Edit" : "Target");
        c->add_option("--omega-v", sa.omega_v, "Visual guidance weight")->check(CLI::NonNegativeNumber);
        c->add_option("--omega-a", sa.omega_a, "Attribute guidance weight")->check(CLI::NonNegativeNumber);
        c->add_option("--eta", sa.eta, "DDIM stochasticity")->check(CLI::Range(0.0, 1.0));
        c->add_option("--steps", sa.steps, "DDIM steps")->check(CLI::PositiveNumber);
        c->add_option("--count", sa.count, "Number of samples")->check(CLI::PositiveNumber);
        c->add_option("--seed", sa.seed, "Base seed; sample i starts from noise seeded by (seed, i)");
        c->add_option("--view", sa.view, "Render view fov,yaw,pitch,roll,radius")->delimiter(',');
    }
    add_condition_options(e, sa.ref, "ref-", "Reference");
    e->add_option("--t-rec", sa.t_rec, "Denoising steps run under the reference conditions")->required();

    EvalArgs ev;
    auto* v = app.add_subcommand("eval", "Score diffusion sampling against the inversion baseline");
    v->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    v->add_option("--task", ev.task, "face-rgb or half-rgb");
    v->add_option("--count", ev.count, "Evaluation samples")->check(CLI::PositiveNumber);
    v->add_option("--seed", ev.seed, "Evaluation seed");
    v->add_option("--data", ev.data, "Dataset for predictor training and the mean latent")->check(CLI::ExistingFile);
    v->add_option("--predictors", ev.predictors, "Predictor weights (trained and saved here when missing)");
    v->add_option("--out", ev.out, "Report directory");
    v->add_option("--steps", ev.steps, "DDIM steps")->check(CLI::PositiveNumber);
    v->add_option("--omega-v", ev.omega_v, "Visual guidance weight")->check(CLI::NonNegativeNumber);
    v->add_option("--omega-a", ev.omega_a, "Attribute guidance weight")->check(CLI::NonNegativeNumber);
    v->add_option("--iterations", ev.iterations, "Baseline iterations")->check(CLI::PositiveNumber);
    v->add_option("--baseline-lr", ev.baseline_lr, "Baseline learning rate")->check(CLI::PositiveNumber);

    BaselineArgs ba;
    auto* b = app.add_subcommand("baseline", "Invert one target by optimizing a latent through the soft renderer");
    b->add_option("--ckpt", ba.ckpt, "Checkpoint providing the generator and normalization")->required()->check(CLI::ExistingFile);
    b->add_option("--data", ba.data, "Dataset for predictor training and the mean latent")->check(CLI::ExistingFile);
    b->add_option("--predictors", ba.predictors, "Predictor weights (trained and saved here when missing)");
    b->add_option("--out", ba.out, "Output directory");
    add_condition_options(b, ba.cond, "", "Target");
    b->add_option("--lambda-attr", ba.lambda_attr, "Attribute loss weight")->check(CLI::NonNegativeNumber);
    b->add_option("--lambda-seg", ba.lambda_seg, "Segmentation loss weight")->check(CLI::NonNegativeNumber);
    b->add_option("--lr", ba.lr, "Adam learning rate on the latent")->check(CLI::PositiveNumber);
    b->add_option("--iterations", ba.iterations, "Optimization steps")->check(CLI::PositiveNumber);
    b->add_option("--init", ba.init, "Initial latent")->check(CLI::IsMember({"zero", "mean", "random"}));
    b->add_option("--seed", ba.seed, "Seed for random initialisation");
    b->add_option("--view", ba.view, "Target view fov,yaw,pitch,roll,radius")->delimiter(',');

    ServeArgs sv;
    auto* h = app.add_subcommand("serve", "Serve the JSON-over-HTTP editing API");
    h->add_option("--ckpt", sv.ckpt, "Checkpoint")->required();
    h->add_option("--port", sv.port, "Port")->check(CLI::Range(1, 65535));
    h->add_option("--host", sv.host, "Bind address");
    h->add_option("--max-count", sv.cfg.max_count, "Largest count per request")->check(CLI::PositiveNumber);
    h->add_option("--max-steps", sv.cfg.max_steps, "Largest DDIM step count per request")->check(CLI::PositiveNumber);

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& ex) {
        return app.exit(ex, out, err);
    }

    try {
        if (g->parsed()) return gen_dataset(gen, out);
        if (t->parsed()) return train(tr, out, err);
        if (s->parsed()) return sample(sa, false, out);
        if (e->parsed()) return sample(sa, true, out);
        if (v->parsed()) return eval(ev, out, err);
        if (b->parsed()) return run_baseline(ba, out, err);
        if (h->parsed()) return serve(sv, out);
    } catch (const UsageError& ex) {
        err << "usage error: " << ex.what() << "\n";
        return 2;
    } catch (const service::ValidationError& ex) {
        err << "invalid input: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace mmld::cli
