#pragma once

// Condition assembly shared by the command line and the HTTP service, and the
// JSON-over-HTTP service itself.

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "json.hpp"
#include "mmld/io.hpp"

namespace httplib {
class Server;
}

namespace mmld::service {

// A request or input file that is well formed but violates a dimension or range
// constraint (HTTP 422).
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
// A request body that cannot be interpreted at all (HTTP 400).
struct MalformedRequest : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);  // throws MalformedRequest

// Raw condition inputs. Masks use nonzero = valid; seg holds class labels.
struct ConditionInputs {
    std::optional<io::Raster> rgb, seg, rgb_mask, seg_mask;
    std::map<std::string, float> attrs;  // by attribute name

    bool empty() const { return !rgb && !seg && attrs.empty(); }
};

// "name=value" with value in [0, 1].
std::pair<std::string, float> parse_attr_assignment(const std::string& text);
// Reads one `name=value` per line; blank lines and '#' comments are skipped.
std::map<std::string, float> read_attr_file(const std::filesystem::path& path);

// Missing modalities become null conditions; a missing mask leaves every pixel
// of a provided raster valid. Throws ValidationError on size, channel or range errors.
diffusion::Conditions build_conditions(const ConditionInputs& in, int n_attr, int size);

// Hard render and ground-truth attributes of a raw latent.
struct SampleView {
    Tensorf latent;
    toygen::Render render;
    std::vector<float> attrs;
};
SampleView describe(const toygen::ToyGenerator& gen, const Tensorf& latent, const toygen::ViewParams& view = {});

nlohmann::json raster_json(const std::vector<std::uint8_t>& data, int width, int height, int channels);
io::Raster raster_from_json(const nlohmann::json& j);

struct ServiceConfig {
    int max_count = 64;
    int max_steps = 1000;
};

struct Response {
    int status = 200;
    nlohmann::json body;
};

// Request handling independent of the transport. The model is loaded once and
// only read afterwards, so handlers may run concurrently.
class Service {
public:
    explicit Service(ServiceConfig cfg = {});
    ~Service();

    void load(const std::filesystem::path& checkpoint);        // blocking
    void load_async(const std::filesystem::path& checkpoint);  // requests get 503 until done
    void set_checkpoint(const io::Checkpoint& ck);
    bool ready() const { return ready_.load(); }

    Response handle(const std::string& method, const std::string& path, const std::string& body) const;
    void mount(httplib::Server& server) const;

private:
    Response health() const;
    Response info() const;
    Response generate(const nlohmann::json& req, bool edit) const;
    Response render(const nlohmann::json& req) const;

    ServiceConfig cfg_;
    std::unique_ptr<diffusion::DiffusionModel> model_;
    std::unique_ptr<toygen::ToyGenerator> gen_;
    long step_ = 0;
    std::atomic<bool> ready_{false};
    mutable std::mutex load_mu_;
    std::string load_error_;
    std::thread loader_;
};

}  // namespace mmld::service
