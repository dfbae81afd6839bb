#include "mmld/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmld::io {

using nlohmann::json;

namespace {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t>& buffer() { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* p, std::size_t n, std::string what) : p_(p), n_(n), what_(std::move(what)) {}
    std::uint8_t u8() { return *take(1); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    const std::uint8_t* take(std::size_t n) {
        if (n > n_ - off_) throw FormatError(what_ + ": truncated data");
        const auto* r = p_ + off_;
        off_ += n;
        return r;
    }
    std::string str() {
        const auto n = u32();
        const auto* b = take(n);
        return std::string(reinterpret_cast<const char*>(b), n);
    }
    std::size_t offset() const { return off_; }
    std::size_t remaining() const { return n_ - off_; }

private:
    std::uint64_t get(int n) {
        const auto* b = take(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t off_ = 0;
    std::string what_;
};

void put_tensor(ByteWriter& w, const std::string& name, const Tensorf& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (float v : t.data()) w.f32(v);
}

NamedTensor get_tensor(ByteReader& r) {
    NamedTensor nt;
    nt.name = r.str();
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad tensor rank for " + nt.name);
    Shape s;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        s.push_back(static_cast<std::size_t>(r.u64()));
        if (s.back() == 0 || s.back() > (std::size_t{1} << 34)) throw FormatError("checkpoint: bad tensor dim for " + nt.name);
        n *= s.back();
    }
    if (n * 4 > r.remaining()) throw FormatError("checkpoint: truncated tensor " + nt.name);
    nt.value = Tensorf(std::move(s));
    for (std::size_t i = 0; i < n; ++i) nt.value[i] = r.f32();
    return nt;
}

std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

const char* prediction_name(diffusion::Prediction p) { return p == diffusion::Prediction::V ? "v" : "x0"; }

}  // namespace

// --- files --------------------------------------------------------------------
std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// --- dataset ------------------------------------------------------------------
std::size_t DatasetHeader::record_size() const {
    const std::size_t px = static_cast<std::size_t>(image_size) * image_size;
    return 4 * static_cast<std::size_t>(k) * d + 3 * px + px + 4 * static_cast<std::size_t>(n_attr) + 4 * kViewFields;
}

toygen::ToyGenConfig DatasetHeader::generator_config() const {
    toygen::ToyGenConfig c;
    c.k = static_cast<int>(k);
    c.d = static_cast<int>(d);
    c.image_size = static_cast<int>(image_size);
    c.n_attr = static_cast<int>(n_attr);
    c.seed = seed;
    return c;
}

void write_dataset(const std::filesystem::path& path, const toygen::ToyGenConfig& cfg,
                   const std::vector<toygen::DatasetRecord>& records) {
    cfg.validate();
    if (records.empty()) throw std::invalid_argument("write_dataset: no records");
    DatasetHeader h;
    h.count = records.size();
    h.k = static_cast<std::uint32_t>(cfg.k);
    h.d = static_cast<std::uint32_t>(cfg.d);
    h.image_size = static_cast<std::uint32_t>(cfg.image_size);
    h.n_attr = static_cast<std::uint32_t>(cfg.n_attr);
    h.seed = cfg.seed;
    ByteWriter w;
    w.buffer().reserve(h.file_size());
    w.bytes(kDatasetMagic, 4);
    w.u16(h.version);
    w.u64(h.count);
    w.u32(h.k);
    w.u32(h.d);
    w.u32(h.image_size);
    w.u32(h.n_attr);
    w.u64(h.seed);
    const std::size_t px = static_cast<std::size_t>(cfg.image_size) * cfg.image_size;
    for (const auto& r : records) {
        if (r.latent.size() != cfg.latent_size() || r.image.size() != 3 * px || r.seg.size() != px ||
            r.attrs.size() != static_cast<std::size_t>(cfg.n_attr))
            throw ShapeError("write_dataset: record does not match the generator config");
        for (float v : r.latent.data()) w.f32(v);
        w.bytes(r.image.data(), r.image.size());
        w.bytes(r.seg.data(), r.seg.size());
        for (float v : r.attrs) w.f32(v);
        for (double v : {r.view.fov, r.view.yaw, r.view.pitch, r.view.roll, r.view.radius}) w.f32(static_cast<float>(v));
    }
    write_file(path, w.buffer());
}

Dataset read_dataset(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size(), "dataset " + path.string());
    if (bytes.size() < kDatasetHeaderSize || std::memcmp(r.take(4), kDatasetMagic, 4) != 0)
        throw FormatError(path.string() + " is not a dataset file (bad magic)");
    Dataset ds;
    auto& h = ds.header;
    h.version = r.u16();
    if (h.version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(h.version));
    h.count = r.u64();
    h.k = r.u32();
    h.d = r.u32();
    h.image_size = r.u32();
    h.n_attr = r.u32();
    h.seed = r.u64();
    if (h.k == 0 || h.d == 0 || h.image_size == 0 || h.n_attr == 0 || h.count == 0)
        throw FormatError("dataset header has zero-sized fields");
    if (bytes.size() != h.file_size())
        throw FormatError("dataset size " + std::to_string(bytes.size()) + " does not match header (expected " +
                          std::to_string(h.file_size()) + ")");
    const std::size_t px = static_cast<std::size_t>(h.image_size) * h.image_size;
    ds.records.reserve(h.count);
    for (std::uint64_t i = 0; i < h.count; ++i) {
        toygen::DatasetRecord rec;
        rec.latent = Tensorf(Shape{h.k, h.d});
        for (auto& v : rec.latent.data()) v = r.f32();
        const auto* img = r.take(3 * px);
        rec.image.assign(img, img + 3 * px);
        const auto* seg = r.take(px);
        rec.seg.assign(seg, seg + px);
        rec.attrs.resize(h.n_attr);
        for (auto& v : rec.attrs) v = r.f32();
        rec.view.fov = r.f32();
        rec.view.yaw = r.f32();
        rec.view.pitch = r.f32();
        rec.view.roll = r.f32();
        rec.view.radius = r.f32();
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

// --- JSON configs -------------------------------------------------------------
json to_json(const toygen::ToyGenConfig& c) {
    return json{{"k", c.k}, {"d", c.d}, {"image_size", c.image_size}, {"n_attr", c.n_attr}, {"seed", c.seed}, {"frozen_dims", c.frozen_dims}};
}

toygen::ToyGenConfig gen_config_from_json(const json& j) {
    toygen::ToyGenConfig c;
    c.k = j.value("k", c.k);
    c.d = j.value("d", c.d);
    c.image_size = j.value("image_size", c.image_size);
    c.n_attr = j.value("n_attr", c.n_attr);
    c.seed = j.value("seed", c.seed);
    c.frozen_dims = j.value("frozen_dims", c.frozen_dims);
    c.validate();
    return c;
}

json to_json(const diffusion::ModelConfig& c) {
    json enc{{"n_attr", c.enc.n_attr},   {"d_cond", c.enc.d_cond},         {"image_size", c.enc.image_size},
             {"vis_channels", c.enc.vis_channels}, {"attr_levels", c.enc.attr_levels}, {"dropout", c.enc.dropout}};
    json net{{"base_channels", c.net.base_channels}, {"channel_mults", c.net.channel_mults}, {"d_cond", c.net.d_cond},
             {"heads", c.net.heads}, {"groups", c.net.groups}, {"k", c.net.k}, {"d", c.net.d}, {"timesteps", c.net.timesteps},
             {"res_kernel", c.net.res_kernel}, {"io_kernel", c.net.io_kernel}};
    return json{{"generator", to_json(c.gen)}, {"encoder", enc}, {"unet", net}, {"timesteps", c.timesteps},
                {"schedule_s", c.schedule_s}, {"beta_clip", c.beta_clip}, {"prediction", prediction_name(c.prediction)}};
}

diffusion::ModelConfig model_config_from_json(const json& j) {
    const auto gen = gen_config_from_json(j.value("generator", json::object()));
    const json net = j.value("unet", json::object());
    const json enc = j.value("encoder", json::object());
    auto c = diffusion::ModelConfig::make(gen, net.value("base_channels", 64), enc.value("d_cond", 64));
    c.timesteps = j.value("timesteps", c.timesteps);
    c.schedule_s = j.value("schedule_s", c.schedule_s);
    c.beta_clip = j.value("beta_clip", c.beta_clip);
    const std::string pred = j.value("prediction", std::string("v"));
    if (pred != "v" && pred != "x0") throw std::invalid_argument("config: prediction must be \"v\" or \"x0\"");
    c.prediction = pred == "v" ? diffusion::Prediction::V : diffusion::Prediction::X0;
    c.enc.vis_channels = enc.value("vis_channels", c.enc.vis_channels);
    c.enc.attr_levels = enc.value("attr_levels", c.enc.attr_levels);
    c.enc.dropout = enc.value("dropout", c.enc.dropout);
    c.net.channel_mults = net.value("channel_mults", c.net.channel_mults);
    c.net.heads = net.value("heads", c.net.heads);
    c.net.groups = net.value("groups", c.net.groups);
    c.net.res_kernel = net.value("res_kernel", c.net.res_kernel);
    c.net.io_kernel = net.value("io_kernel", c.net.io_kernel);
    c.net.timesteps = c.timesteps;
    c.validate();
    return c;
}

json to_json(const diffusion::TrainConfig& c) {
    const auto& m = c.masking;
    json mask{{"p_modality_mask", m.p_modality_mask}, {"strokes_min", m.strokes_min}, {"strokes_max", m.strokes_max},
              {"radius_min", m.radius_min}, {"radius_max", m.radius_max}, {"length_min", m.length_min},
              {"length_max", m.length_max}, {"p_class_drop", m.p_class_drop}, {"p_condition_drop", m.p_condition_drop}};
    return json{{"steps", c.steps}, {"batch", c.batch}, {"max_lr", c.max_lr}, {"warmup_frac", c.warmup_frac},
                {"div_factor", c.div_factor}, {"seed", c.seed}, {"masking", mask}};
}

diffusion::TrainConfig train_config_from_json(const json& j) {
    diffusion::TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.max_lr = j.value("max_lr", c.max_lr);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.div_factor = j.value("div_factor", c.div_factor);
    c.seed = j.value("seed", c.seed);
    const json m = j.value("masking", json::object());
    auto& p = c.masking;
    p.p_modality_mask = m.value("p_modality_mask", p.p_modality_mask);
    p.strokes_min = m.value("strokes_min", p.strokes_min);
    p.strokes_max = m.value("strokes_max", p.strokes_max);
    p.radius_min = m.value("radius_min", p.radius_min);
    p.radius_max = m.value("radius_max", p.radius_max);
    p.length_min = m.value("length_min", p.length_min);
    p.length_max = m.value("length_max", p.length_max);
    p.p_class_drop = m.value("p_class_drop", p.p_class_drop);
    p.p_condition_drop = m.value("p_condition_drop", p.p_condition_drop);
    c.validate();
    return c;
}

// --- checkpoint ---------------------------------------------------------------
Checkpoint capture(const diffusion::DiffusionModel& m, std::uint64_t init_seed, long step, const diffusion::TrainConfig* train,
                   const AdamState<float>* adam) {
    Checkpoint ck;
    ck.config = m.config();
    ck.init_seed = init_seed;
    ck.step = step;
    if (train) ck.train = *train;
    const auto& ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i) ck.params.push_back({ps[i].name, ps[i].value});
    ck.norm = m.norm;
    if (adam) ck.adam = *adam;
    return ck;
}

std::unique_ptr<diffusion::DiffusionModel> instantiate(const Checkpoint& ck) {
    auto m = std::make_unique<diffusion::DiffusionModel>(ck.config, ck.init_seed);
    auto& ps = m->params();
    if (ps.size() != ck.params.size())
        throw FormatError("checkpoint has " + std::to_string(ck.params.size()) + " tensors, model expects " + std::to_string(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& src = ck.params[i];
        if (src.name != ps[i].name) throw FormatError("checkpoint tensor " + src.name + " where " + ps[i].name + " was expected");
        if (src.value.shape() != ps[i].value.shape())
            throw FormatError("checkpoint tensor " + src.name + " has shape " + to_string(src.value.shape()) + ", expected " +
                              to_string(ps[i].value.shape()));
        ps[i].value = src.value;
    }
    m->norm = ck.norm;
    return m;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    json meta{{"config", to_json(ck.config)}, {"init_seed", ck.init_seed}, {"step", ck.step}, {"has_adam", ck.adam.has_value()}};
    if (ck.train) meta["train"] = to_json(*ck.train);
    if (ck.adam)
        meta["adam"] = json{{"step", ck.adam->step}, {"beta1", ck.adam->beta1}, {"beta2", ck.adam->beta2}, {"eps", ck.adam->eps}};
    if (ck.norm.min.empty()) throw std::invalid_argument("checkpoint: missing normalization statistics");

    ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u16(kCheckpointVersion);
    const std::string text = meta.dump();
    w.u64(text.size());
    w.bytes(text.data(), text.size());
    const std::size_t payload_start = w.size();
    std::uint32_t count = static_cast<std::uint32_t>(ck.params.size() + 2 + (ck.adam ? 2 * ck.params.size() : 0));
    w.u32(count);
    for (const auto& p : ck.params) put_tensor(w, p.name, p.value);
    put_tensor(w, "norm.min", ck.norm.min);
    put_tensor(w, "norm.max", ck.norm.max);
    if (ck.adam) {
        if (ck.adam->m.size() != ck.params.size()) throw std::invalid_argument("checkpoint: optimizer state does not match parameters");
        for (std::size_t i = 0; i < ck.params.size(); ++i) put_tensor(w, "adam.m." + ck.params[i].name, ck.adam->m[i]);
        for (std::size_t i = 0; i < ck.params.size(); ++i) put_tensor(w, "adam.v." + ck.params[i].name, ck.adam->v[i]);
    }
    const auto sum = crc(w.buffer().data() + payload_start, w.size() - payload_start);
    w.u32(sum);
    return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes.data(), bytes.size(), "checkpoint");
    if (bytes.size() < 14 || std::memcmp(r.take(4), kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint file (bad magic)");
    const auto version = r.u16();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto len = r.u64();
    if (len > r.remaining()) throw FormatError("checkpoint: truncated metadata");
    const auto* text = r.take(len);
    json meta;
    try {
        meta = json::parse(text, text + len);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: corrupt metadata: ") + e.what());
    }
    const std::size_t payload_start = r.offset();
    if (bytes.size() < payload_start + 8) throw FormatError("checkpoint: truncated payload");
    const std::size_t payload_end = bytes.size() - 4;
    ByteReader tail(bytes.data() + payload_end, 4, "checkpoint");
    if (crc(bytes.data() + payload_start, payload_end - payload_start) != tail.u32())
        throw FormatError("checkpoint: checksum mismatch (file is corrupt)");

    Checkpoint ck;
    ck.config = model_config_from_json(meta.at("config"));
    ck.init_seed = meta.at("init_seed").get<std::uint64_t>();
    ck.step = meta.at("step").get<long>();
    if (meta.contains("train")) ck.train = train_config_from_json(meta["train"]);
    const bool has_adam = meta.at("has_adam").get<bool>();

    ByteReader p(bytes.data() + payload_start, payload_end - payload_start, "checkpoint");
    const auto count = p.u32();
    std::vector<NamedTensor> all;
    for (std::uint32_t i = 0; i < count; ++i) all.push_back(get_tensor(p));
    if (p.remaining() != 0) throw FormatError("checkpoint: trailing bytes after tensors");
    const std::size_t n_params = has_adam ? (count - 2) / 3 : count - 2;
    if (count < 2 || (has_adam && (count - 2) % 3 != 0)) throw FormatError("checkpoint: inconsistent tensor count");
    ck.params.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(all.begin() + static_cast<long>(n_params)));
    if (all[n_params].name != "norm.min" || all[n_params + 1].name != "norm.max") throw FormatError("checkpoint: missing normalization statistics");
    ck.norm.min = std::move(all[n_params].value);
    ck.norm.max = std::move(all[n_params + 1].value);
    if (has_adam) {
        AdamState<float> a;
        const json& am = meta.at("adam");
        a.step = am.at("step").get<long>();
        a.beta1 = am.at("beta1").get<double>();
        a.beta2 = am.at("beta2").get<double>();
        a.eps = am.at("eps").get<double>();
        for (std::size_t i = 0; i < n_params; ++i) {
            auto& mt = all[n_params + 2 + i];
            auto& vt = all[2 * n_params + 2 + i];
            if (mt.name != "adam.m." + ck.params[i].name || vt.name != "adam.v." + ck.params[i].name)
                throw FormatError("checkpoint: optimizer tensors out of order");
            a.m.push_back(std::move(mt.value));
            a.v.push_back(std::move(vt.value));
        }
        ck.adam = std::move(a);
    }
    return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }
Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::vector<std::uint8_t> encode_blob(const TensorBlob& b) {
    ByteWriter w;
    w.bytes(kBlobMagic, 4);
    w.u16(kBlobVersion);
    const std::string text = b.meta.dump();
    w.u64(text.size());
    w.bytes(text.data(), text.size());
    const std::size_t start = w.size();
    w.u32(static_cast<std::uint32_t>(b.tensors.size()));
    for (const auto& t : b.tensors) put_tensor(w, t.name, t.value);
    w.u32(crc(w.buffer().data() + start, w.size() - start));
    return std::move(w.buffer());
}

TensorBlob decode_blob(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes.data(), bytes.size(), "tensor file");
    if (bytes.size() < 14 || std::memcmp(r.take(4), kBlobMagic, 4) != 0) throw FormatError("not a tensor file (bad magic)");
    if (r.u16() != kBlobVersion) throw FormatError("unsupported tensor file version");
    const auto len = r.u64();
    if (len > r.remaining()) throw FormatError("tensor file: truncated metadata");
    const auto* text = r.take(len);
    TensorBlob b;
    try {
        b.meta = json::parse(text, text + len);
    } catch (const json::exception& e) {
        throw FormatError(std::string("tensor file: corrupt metadata: ") + e.what());
    }
    const std::size_t start = r.offset();
    if (bytes.size() < start + 8) throw FormatError("tensor file: truncated payload");
    const std::size_t end = bytes.size() - 4;
    ByteReader tail(bytes.data() + end, 4, "tensor file");
    if (crc(bytes.data() + start, end - start) != tail.u32()) throw FormatError("tensor file: checksum mismatch (file is corrupt)");
    ByteReader p(bytes.data() + start, end - start, "tensor file");
    const auto count = p.u32();
    for (std::uint32_t i = 0; i < count; ++i) b.tensors.push_back(get_tensor(p));
    if (p.remaining() != 0) throw FormatError("tensor file: trailing bytes after tensors");
    return b;
}

void write_latent(const std::filesystem::path& path, const Tensorf& latent, const nlohmann::json& meta) {
    if (latent.rank() != 2) throw ShapeError("latent files hold [k, d] tensors");
    TensorBlob b;
    b.meta = meta;
    b.meta["kind"] = "latent";
    b.tensors.push_back({"latent", latent});
    write_file(path, encode_blob(b));
}

Tensorf read_latent(const std::filesystem::path& path) {
    auto b = decode_blob(read_file(path));
    if (b.meta.value("kind", std::string()) != "latent" || b.tensors.size() != 1 || b.tensors[0].value.rank() != 2)
        throw FormatError(path.string() + " does not hold a latent");
    return std::move(b.tensors[0].value);
}

// --- rasters ------------------------------------------------------------------
namespace {

void write_pnm(const std::filesystem::path& path, const char* magic, const std::vector<std::uint8_t>& data, int w, int h, int ch) {
    if (w <= 0 || h <= 0 || data.size() != static_cast<std::size_t>(w) * h * ch) throw ShapeError("pnm: raster size mismatch");
    std::ostringstream os;
    os << magic << '\n' << w << ' ' << h << "\n255\n";
    const std::string head = os.str();
    std::vector<std::uint8_t> out(head.begin(), head.end());
    out.insert(out.end(), data.begin(), data.end());
    write_file(path, out);
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, int width, int height) {
    write_pnm(path, "P6", rgb, width, height, 3);
}

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray, int width, int height) {
    write_pnm(path, "P5", gray, width, height, 1);
}

Raster read_pnm(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#')
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            else if (std::isspace(bytes[pos]))
                ++pos;
            else
                break;
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
        if (t.empty()) throw FormatError(path.string() + ": truncated PNM header");
        return t;
    };
    const std::string magic = token();
    if (magic != "P5" && magic != "P6") throw FormatError(path.string() + ": only binary PGM (P5) and PPM (P6) are supported");
    Raster r;
    try {
        r.width = std::stoi(token());
        r.height = std::stoi(token());
        if (std::stoi(token()) != 255) throw FormatError(path.string() + ": maxval must be 255");
    } catch (const std::logic_error&) {
        throw FormatError(path.string() + ": malformed PNM header");
    }
    ++pos;  // single whitespace after maxval
    r.channels = magic == "P6" ? 3 : 1;
    if (r.width <= 0 || r.height <= 0) throw FormatError(path.string() + ": non-positive dimensions");
    const std::size_t n = static_cast<std::size_t>(r.width) * r.height * r.channels;
    if (bytes.size() < pos + n) throw FormatError(path.string() + ": truncated pixel data");
    r.data.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
    return r;
}

std::vector<std::uint8_t> seg_to_gray(const std::vector<std::uint8_t>& seg) {
    std::vector<std::uint8_t> g(seg.size());
    for (std::size_t i = 0; i < seg.size(); ++i) g[i] = static_cast<std::uint8_t>(seg[i] * kSegScale);
    return g;
}

std::vector<std::uint8_t> gray_to_seg(const std::vector<std::uint8_t>& gray) {
    std::vector<std::uint8_t> s(gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const int label = (gray[i] + kSegScale / 2) / kSegScale;
        if (label >= toygen::kNumClasses) throw FormatError("segmentation value " + std::to_string(gray[i]) + " is not a class label");
        s[i] = static_cast<std::uint8_t>(label);
    }
    return s;
}

}  // namespace mmld::io
