#include "mmld/service.hpp"

#include <sodium.h>

#include <cmath>
#include <fstream>
#include <random>

#include "httplib.h"

namespace mmld::service {

using nlohmann::json;

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
    sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
    out.resize(out.size() - 1);  // trailing NUL
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    std::vector<std::uint8_t> out(text.size() / 4 * 3 + 3);
    std::size_t len = 0;
    const char* end = nullptr;
    if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &len, &end, sodium_base64_VARIANT_ORIGINAL) != 0 ||
        end != text.data() + text.size())
        throw MalformedRequest("invalid base64 payload");
    out.resize(len);
    return out;
}

std::pair<std::string, float> parse_attr_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("attribute '" + text + "' is not of the form name=value");
    auto trim = [](const std::string& x) {
        const auto b = x.find_first_not_of(" \t\r");
        return b == std::string::npos ? std::string() : x.substr(b, x.find_last_not_of(" \t\r") - b + 1);
    };
    const std::string name = trim(text.substr(0, eq)), value = trim(text.substr(eq + 1));
    if (name.empty()) throw ValidationError("attribute '" + text + "' has no name");
    std::size_t used = 0;
    float v = 0;
    try {
        v = std::stof(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != value.size()) throw ValidationError("attribute '" + name + "' has a non-numeric value '" + value + "'");
    if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("attribute '" + name + "' must lie in [0, 1]");
    return {name, v};
}

std::map<std::string, float> read_attr_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw io::IoError("cannot open attribute file " + path.string());
    std::map<std::string, float> out;
    std::string line;
    while (std::getline(f, line)) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos || line[b] == '#') continue;
        const auto e = line.find_last_not_of(" \t\r");
        const auto [name, v] = parse_attr_assignment(line.substr(b, e - b + 1));
        out[name] = v;
    }
    return out;
}

namespace {

void check_raster(const io::Raster& r, int size, int channels, const char* what) {
    if (r.width != size || r.height != size)
        throw ValidationError(std::string(what) + " must be " + std::to_string(size) + "x" + std::to_string(size) + ", got " +
                              std::to_string(r.width) + "x" + std::to_string(r.height));
    if (r.channels != channels) throw ValidationError(std::string(what) + " must have " + std::to_string(channels) + " channel(s)");
    if (r.data.size() != static_cast<std::size_t>(size) * size * channels) throw ValidationError(std::string(what) + " has the wrong byte count");
}

std::vector<std::uint8_t> validity(const std::optional<io::Raster>& mask, int size, const char* what) {
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    if (!mask) return std::vector<std::uint8_t>(hw, 1);
    check_raster(*mask, size, 1, what);
    std::vector<std::uint8_t> v(hw);
    for (std::size_t i = 0; i < hw; ++i) v[i] = mask->data[i] != 0;
    return v;
}

}  // namespace

diffusion::Conditions build_conditions(const ConditionInputs& in, int n_attr, int size) {
    auto c = diffusion::null_conditions(n_attr, size);
    if (in.rgb_mask && !in.rgb) throw ValidationError("an RGB mask was given without an RGB condition");
    if (in.seg_mask && !in.seg) throw ValidationError("a segmentation mask was given without a segmentation condition");
    if (in.rgb) {
        check_raster(*in.rgb, size, 3, "RGB condition");
        for (std::size_t i = 0; i < in.rgb->data.size(); ++i) c.visual.rgb[i] = in.rgb->data[i] / 255.0f;
        c.visual.rgb_valid = validity(in.rgb_mask, size, "RGB mask");
    }
    if (in.seg) {
        check_raster(*in.seg, size, 1, "segmentation condition");
        for (std::size_t i = 0; i < in.seg->data.size(); ++i) {
            if (in.seg->data[i] >= toygen::kNumClasses)
                throw ValidationError("segmentation label " + std::to_string(in.seg->data[i]) + " is not a known class");
            c.visual.seg[i] = in.seg->data[i];
        }
        c.visual.seg_valid = validity(in.seg_mask, size, "segmentation mask");
    }
    const auto names = toygen::attribute_names(n_attr);
    for (const auto& [name, v] : in.attrs) {
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw ValidationError("unknown attribute '" + name + "'");
        if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("attribute '" + name + "' must lie in [0, 1]");
        const auto slot = static_cast<std::size_t>(it - names.begin());
        c.attrs.values[slot] = v;
        c.attrs.mask[slot] = 0;
    }
    return c;
}

SampleView describe(const toygen::ToyGenerator& gen, const Tensorf& latent, const toygen::ViewParams& view) {
    SampleView s;
    s.latent = latent;
    const auto params = gen.decode(latent);
    s.render = gen.render(params, view, toygen::RenderMode::Hard);
    s.attrs = gen.attributes(params);
    return s;
}

json raster_json(const std::vector<std::uint8_t>& data, int width, int height, int channels) {
    return json{{"width", width}, {"height", height}, {"channels", channels}, {"data", base64_encode(data)}};
}

io::Raster raster_from_json(const json& j) {
    if (!j.is_object()) throw MalformedRequest("raster must be an object with width, height, channels and data");
    io::Raster r;
    try {
        r.width = j.at("width").get<int>();
        r.height = j.at("height").get<int>();
        r.channels = j.at("channels").get<int>();
        r.data = base64_decode(j.at("data").get<std::string>());
    } catch (const json::exception& e) {
        throw MalformedRequest(std::string("raster: ") + e.what());
    }
    if (r.width <= 0 || r.height <= 0 || r.channels <= 0) throw ValidationError("raster dimensions must be positive");
    if (r.data.size() != static_cast<std::size_t>(r.width) * r.height * r.channels)
        throw ValidationError("raster payload holds " + std::to_string(r.data.size()) + " bytes, expected width*height*channels");
    return r;
}

// --- service -----------------------------------------------------------------

namespace {

json error_body(const std::string& message) { return json{{"error", message}}; }

ConditionInputs inputs_from_json(const json& j, int n_attr) {
    if (!j.is_object()) throw MalformedRequest("conditions must be a JSON object");
    ConditionInputs in;
    auto raster = [&](const char* key) -> std::optional<io::Raster> {
        if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
        return raster_from_json(j.at(key));
    };
    in.rgb = raster("rgb");
    in.seg = raster("seg");
    in.rgb_mask = raster("rgb_mask");
    in.seg_mask = raster("seg_mask");
    if (j.contains("attrs") && !j.at("attrs").is_null()) {
        const auto& a = j.at("attrs");
        const auto names = toygen::attribute_names(n_attr);
        auto value = [](const json& v, const std::string& name) {
            if (!v.is_number()) throw MalformedRequest("attribute '" + name + "' must be a number or null");
            return v.get<float>();
        };
        if (a.is_object()) {
            for (const auto& [name, v] : a.items())
                if (!v.is_null()) in.attrs[name] = value(v, name);
        } else if (a.is_array()) {
            if (a.size() != names.size())
                throw ValidationError("attrs array must have " + std::to_string(names.size()) + " entries (null = unspecified)");
            for (std::size_t i = 0; i < a.size(); ++i)
                if (!a[i].is_null()) in.attrs[names[i]] = value(a[i], names[i]);
        } else {
            throw MalformedRequest("attrs must be an object of name: value or an array with nulls");
        }
    }
    return in;
}

template <typename T>
T field(const json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    const auto& v = j.at(key);
    if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw MalformedRequest(std::string(key) + " must be an integer");
    } else {
        if (!v.is_number()) throw MalformedRequest(std::string(key) + " must be a number");
    }
    return v.get<T>();
}

toygen::ViewParams view_from_json(const json& j) {
    toygen::ViewParams v;
    if (!j.contains("view") || j.at("view").is_null()) return v;
    const auto& o = j.at("view");
    if (!o.is_object()) throw MalformedRequest("view must be an object");
    v.fov = field(o, "fov", v.fov);
    v.yaw = field(o, "yaw", v.yaw);
    v.pitch = field(o, "pitch", v.pitch);
    v.roll = field(o, "roll", v.roll);
    v.radius = field(o, "radius", v.radius);
    if (!(v.fov > 0 && v.fov < 180) || !(v.radius > 0)) throw ValidationError("view: fov must be in (0, 180) degrees and radius positive");
    return v;
}

json sample_json(const SampleView& s, const std::vector<std::string>& names, std::size_t index, const std::vector<std::size_t>& shape) {
    json attrs = json::object();
    for (std::size_t i = 0; i < names.size(); ++i) attrs[names[i]] = s.attrs[i];
    const int S = s.render.size;
    return json{{"index", index},
                {"latent", std::vector<float>(s.latent.data().begin(), s.latent.data().end())},
                {"latent_shape", shape},
                {"image", base64_encode(toygen::quantize(s.render.rgb))},
                {"width", S},
                {"height", S},
                {"channels", 3},
                {"seg", base64_encode(s.render.seg)},
                {"measured_attrs", attrs}};
}

}  // namespace

Service::Service(ServiceConfig cfg) : cfg_(cfg) {
    if (sodium_init() < 0) throw std::runtime_error("libsodium failed to initialise");
}

Service::~Service() {
    if (loader_.joinable()) loader_.join();
}

void Service::set_checkpoint(const io::Checkpoint& ck) {
    if (ready_) throw std::logic_error("service: model already loaded");
    model_ = io::instantiate(ck);
    gen_ = std::make_unique<toygen::ToyGenerator>(ck.config.gen);
    step_ = ck.step;
    ready_.store(true);
}

void Service::load(const std::filesystem::path& checkpoint) { set_checkpoint(io::read_checkpoint(checkpoint)); }

void Service::load_async(const std::filesystem::path& checkpoint) {
    if (loader_.joinable()) throw std::logic_error("service: a load is already in progress");
    loader_ = std::thread([this, checkpoint] {
        try {
            load(checkpoint);
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(load_mu_);
            load_error_ = e.what();
        }
    });
}

Response Service::health() const {
    if (ready_) return {200, json{{"status", "ok"}}};
    std::lock_guard<std::mutex> lock(load_mu_);
    if (!load_error_.empty()) return {503, json{{"status", "error"}, {"error", load_error_}}};
    return {503, json{{"status", "loading"}}};
}

Response Service::info() const {
    const auto& mc = model_->config();
    json palette = json::array();
    for (const auto& c : toygen::class_palette()) palette.push_back({c[0], c[1], c[2]});
    return {200, json{{"k", mc.gen.k},
                      {"d", mc.gen.d},
                      {"image_size", mc.gen.image_size},
                      {"n_attr", mc.gen.n_attr},
                      {"attributes", toygen::attribute_names(mc.gen.n_attr)},
                      {"classes", toygen::class_names()},
                      {"palette", palette},
                      {"timesteps", mc.timesteps},
                      {"step", step_},
                      {"prediction", mc.prediction == diffusion::Prediction::V ? "v" : "x0"},
                      {"limits", {{"max_count", cfg_.max_count}, {"max_steps", std::min(cfg_.max_steps, mc.timesteps)}}},
                      {"defaults", {{"steps", 100}, {"eta", 0.0}, {"omega_v", 1.0}, {"omega_a", 1.0}, {"count", 1}}}}};
}

Response Service::generate(const json& req, bool edit) const {
    const auto& mc = model_->config();
    diffusion::SampleConfig sc;
    sc.ddim_steps = field(req, "steps", 100);
    sc.eta = field(req, "eta", 0.0);
    sc.omega_v = field(req, "omega_v", 1.0);
    sc.omega_a = field(req, "omega_a", 1.0);
    const int count = field(req, "count", 1);
    std::uint64_t seed = 0;
    if (req.contains("seed") && !req.at("seed").is_null()) {
        if (!req.at("seed").is_number_unsigned()) throw MalformedRequest("seed must be a non-negative integer");
        seed = req.at("seed").get<std::uint64_t>();
    } else {
        std::random_device rd;
        seed = (static_cast<std::uint64_t>(rd()) << 21) ^ rd();  // kept below 2^53 for JSON clients
        seed &= (std::uint64_t{1} << 53) - 1;
    }
    if (count < 1 || count > cfg_.max_count) throw ValidationError("count must be in [1, " + std::to_string(cfg_.max_count) + "]");
    const int max_steps = std::min(cfg_.max_steps, mc.timesteps);
    if (sc.ddim_steps < 1 || sc.ddim_steps > max_steps) throw ValidationError("steps must be in [1, " + std::to_string(max_steps) + "]");
    if (!(sc.eta >= 0 && sc.eta <= 1)) throw ValidationError("eta must be in [0, 1]");
    if (!(sc.omega_v >= 0) || !(sc.omega_a >= 0) || !std::isfinite(sc.omega_v) || !std::isfinite(sc.omega_a))
        throw ValidationError("guidance weights must be finite and non-negative");
    sc.seed = seed;
    sc.noise_seed = derive_seed(seed, 1);
    const auto view = view_from_json(req);

    const auto conds = build_conditions(inputs_from_json(req, mc.gen.n_attr), mc.gen.n_attr, mc.gen.image_size);
    const std::vector<diffusion::Conditions> edit_conds(static_cast<std::size_t>(count), conds);
    json echo{{"seed", seed}, {"steps", sc.ddim_steps}, {"eta", sc.eta}, {"omega_v", sc.omega_v}, {"omega_a", sc.omega_a}, {"count", count}};

    diffusion::SampleResult res;
    if (edit) {
        if (!req.contains("reference")) throw MalformedRequest("edit requests need a reference condition object");
        if (!req.contains("t_rec")) throw MalformedRequest("edit requests need t_rec");
        const int t_rec = field(req, "t_rec", 0);
        if (t_rec < 0 || t_rec > sc.ddim_steps) throw ValidationError("t_rec must be in [0, steps]");
        const auto ref = build_conditions(inputs_from_json(req.at("reference"), mc.gen.n_attr), mc.gen.n_attr, mc.gen.image_size);
        diffusion::EditPlan plan;
        plan.reference.assign(static_cast<std::size_t>(count), ref);
        plan.edit = edit_conds;
        plan.t_rec = t_rec;
        plan.sample = sc;
        res = diffusion::edit(*model_, plan);
        echo["t_rec"] = t_rec;
    } else {
        res = diffusion::ddim_sample(*model_, edit_conds, sc);
    }

    const auto names = toygen::attribute_names(mc.gen.n_attr);
    const std::vector<std::size_t> shape{static_cast<std::size_t>(mc.gen.k), static_cast<std::size_t>(mc.gen.d)};
    json samples = json::array();
    for (std::size_t i = 0; i < res.latents.size(); ++i) samples.push_back(sample_json(describe(*gen_, res.latents[i], view), names, i, shape));
    echo["samples"] = std::move(samples);
    return {200, echo};
}

Response Service::render(const json& req) const {
    const auto& g = model_->config().gen;
    if (!req.contains("latent") || !req.at("latent").is_array()) throw MalformedRequest("render requests need a latent array");
    const auto& a = req.at("latent");
    if (a.size() != g.latent_size())
        throw ValidationError("latent must have " + std::to_string(g.latent_size()) + " entries (k x d, row-major)");
    Tensorf z({static_cast<std::size_t>(g.k), static_cast<std::size_t>(g.d)});
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number()) throw MalformedRequest("latent entries must be numbers");
        z[i] = a[i].get<float>();
        if (!std::isfinite(z[i])) throw ValidationError("latent entries must be finite");
    }
    const auto s = describe(*gen_, z, view_from_json(req));
    auto body = sample_json(s, toygen::attribute_names(g.n_attr), 0, {static_cast<std::size_t>(g.k), static_cast<std::size_t>(g.d)});
    body.erase("index");
    return {200, body};
}

Response Service::handle(const std::string& method, const std::string& path, const std::string& body) const {
    static const std::map<std::string, std::string> routes{
        {"/health", "GET"}, {"/model/info", "GET"}, {"/generate", "POST"}, {"/edit", "POST"}, {"/render", "POST"}};
    const auto route = routes.find(path);
    if (route == routes.end()) return {404, error_body("no such endpoint: " + path)};
    if (route->second != method) return {405, error_body(path + " expects " + route->second)};
    if (path == "/health") return health();
    if (!ready_) {
        auto h = health();
        h.body["error"] = h.body.value("error", std::string("model is still loading"));
        return h;
    }
    try {
        if (path == "/model/info") return info();
        json req;
        try {
            req = json::parse(body);
        } catch (const json::parse_error& e) {
            return {400, error_body(std::string("malformed JSON: ") + e.what())};
        }
        if (!req.is_object()) return {400, error_body("request body must be a JSON object")};
        if (path == "/render") return render(req);
        return generate(req, path == "/edit");
    } catch (const MalformedRequest& e) {
        return {400, error_body(e.what())};
    } catch (const json::exception& e) {
        return {400, error_body(e.what())};
    } catch (const ValidationError& e) {
        return {422, error_body(e.what())};
    } catch (const std::invalid_argument& e) {
        return {422, error_body(e.what())};
    } catch (const std::out_of_range& e) {
        return {422, error_body(e.what())};
    } catch (const std::exception& e) {
        return {500, error_body(e.what())};
    }
}

void Service::mount(httplib::Server& server) const {
    auto bind = [this](const std::string& method) {
        return [this, method](const httplib::Request& req, httplib::Response& res) {
            const auto r = handle(method, req.path, req.body);
            res.status = r.status;
            res.set_content(r.body.dump(), "application/json");
        };
    };
    for (const char* p : {"/health", "/model/info", "/generate", "/edit", "/render"}) {
        server.Get(p, bind("GET"));
        server.Post(p, bind("POST"));
    }
}

}  // namespace mmld::service
