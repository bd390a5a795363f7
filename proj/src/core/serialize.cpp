#include "decomp/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

namespace decomp {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::string_view law_name(SubsetLaw l) { return l == SubsetLaw::uniform_size ? "uniform_size" : "uniform_subset"; }

SubsetLaw law_from_name(const std::string& s) {
    if (s == "uniform_size") return SubsetLaw::uniform_size;
    if (s == "uniform_subset") return SubsetLaw::uniform_subset;
    throw ConfigError("unknown subset_law '" + s + "' (expected uniform_size or uniform_subset)");
}

std::string_view norm_name(RecNormalization n) {
    return n == RecNormalization::all_elements ? "all_elements" : "mask_count";
}

RecNormalization norm_from_name(const std::string& s) {
    if (s == "all_elements") return RecNormalization::all_elements;
    if (s == "mask_count") return RecNormalization::mask_count;
    throw ConfigError("unknown rec_normalization '" + s + "' (expected all_elements or mask_count)");
}

// Walks the keys of an object, rejecting any that no handler claims.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError(where_ + "." + key + ": wrong type");
        }
    }

    template <class F>
    void with(const char* key, F&& f) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it != j_.end()) f(*it, where_ + "." + key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

void read_phase(const json& j, const std::string& where, PhaseSchedule& p) {
    Reader r(j, where);
    r.get("lr", p.lr);
    r.get("steps", p.steps);
    r.finish();
}

}  // namespace

json to_json(const TrainConfig& c) {
    return {
        {"phase1", {{"lr", c.phase1.lr}, {"steps", c.phase1.steps}}},
        {"phase2", {{"lr", c.phase2.lr}, {"steps", c.phase2.steps}}},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"weight_decay", c.weight_decay},
        {"adam_eps", c.adam_eps},
        {"decoupled_weight_decay", c.decoupled_weight_decay},
        {"lambda_attn", c.lambda_attn},
        {"batch_size", c.batch_size},
        {"use_two_phases", c.use_two_phases},
        {"use_masked_loss", c.use_masked_loss},
        {"use_attn_loss", c.use_attn_loss},
        {"use_union_sampling", c.use_union_sampling},
        {"method", method_name(c.method)},
        {"subset_law", law_name(c.subset_law)},
        {"rec_normalization", norm_name(c.rec_normalization)},
        {"initializer_word", c.initializer_word},
        {"background_handle", c.background_handle},
        {"baseline_collection_size", c.baseline_collection_size},
        {"seed", c.seed},
    };
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    Reader r(j, "train");
    r.with("phase1", [&](const json& v, const std::string& w) { read_phase(v, w, c.phase1); });
    r.with("phase2", [&](const json& v, const std::string& w) { read_phase(v, w, c.phase2); });
    r.get("beta1", c.beta1);
    r.get("beta2", c.beta2);
    r.get("weight_decay", c.weight_decay);
    r.get("adam_eps", c.adam_eps);
    r.get("decoupled_weight_decay", c.decoupled_weight_decay);
    r.get("lambda_attn", c.lambda_attn);
    r.get("batch_size", c.batch_size);
    r.get("use_two_phases", c.use_two_phases);
    r.get("use_masked_loss", c.use_masked_loss);
    r.get("use_attn_loss", c.use_attn_loss);
    r.get("use_union_sampling", c.use_union_sampling);
    r.with("method", [&](const json& v, const std::string& w) {
        if (!v.is_string()) throw ConfigError(w + ": wrong type");
        c.method = method_from_name(v.get<std::string>());
    });
    r.with("subset_law", [&](const json& v, const std::string& w) {
        if (!v.is_string()) throw ConfigError(w + ": wrong type");
        c.subset_law = law_from_name(v.get<std::string>());
    });
    r.with("rec_normalization", [&](const json& v, const std::string& w) {
        if (!v.is_string()) throw ConfigError(w + ": wrong type");
        c.rec_normalization = norm_from_name(v.get<std::string>());
    });
    r.get("initializer_word", c.initializer_word);
    r.get("background_handle", c.background_handle);
    r.get("baseline_collection_size", c.baseline_collection_size);
    r.get("seed", c.seed);
    r.finish();
    return c;
}

json to_json(const DenoiserConfig& c) {
    return {{"image_size", c.image_size}, {"channels", c.channels}, {"d_model", c.d_model}, {"d_text", c.d_text},
            {"time_dim", c.time_dim},     {"groups", c.groups},     {"norm_eps", c.norm_eps}};
}

DenoiserConfig denoiser_config_from_json(const json& j, DenoiserConfig c) {
    Reader r(j, "denoiser");
    r.get("image_size", c.image_size);
    r.get("channels", c.channels);
    r.get("d_model", c.d_model);
    r.get("d_text", c.d_text);
    r.get("time_dim", c.time_dim);
    r.get("groups", c.groups);
    r.get("norm_eps", c.norm_eps);
    r.finish();
    return c;
}

json schedule_to_json(const NoiseSchedule& s) {
    return {{"steps", s.steps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

NoiseSchedule schedule_from_json(const json& j) {
    NoiseSchedule d = NoiseSchedule::linear();
    std::size_t steps = d.steps;
    double b0 = d.beta_start, b1 = d.beta_end;
    Reader r(j, "schedule");
    r.get("steps", steps);
    r.get("beta_start", b0);
    r.get("beta_end", b1);
    r.finish();
    return NoiseSchedule::linear(steps, b0, b1);
}

// ---- checkpoint ----

namespace {

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T take(std::string_view bytes, std::size_t& pos, const char* what) {
    if (bytes.size() - pos < sizeof(T)) throw CheckpointError(std::string("checkpoint truncated in ") + what);
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
    json blobs = json::array();
    std::string payload;
    std::uint64_t offset = 0;
    ck.model.visit([&](const std::string& name, const Tensor& t) {
        blobs.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
        payload.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(double));
        offset += t.numel();
    });
    json handles = json::array();
    for (const auto& h : ck.model.handles.all())
        handles.push_back({{"name", h.name}, {"token", h.token}, {"background", h.background}});

    json header = {
        {"config", to_json(ck.config)},
        {"schedule", schedule_to_json(ck.model.schedule)},
        {"denoiser", to_json(ck.model.unet.config)},
        {"vocab", ck.model.vocab.words()},
        {"handles", handles},
        {"blobs", blobs},
        {"concept_names", ck.concept_names},
        {"phase1_steps", ck.phase1_steps},
        {"phase2_steps", ck.phase2_steps},
    };
    std::string h = header.dump();
    std::string out(kCheckpointMagic);
    put<std::uint32_t>(out, Checkpoint::version);
    put<std::uint64_t>(out, h.size());
    out += h;
    out += payload;
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) throw CheckpointError("not a checkpoint file");
    std::size_t pos = kCheckpointMagic.size();
    auto version = take<std::uint32_t>(bytes, pos, "version");
    if (version != Checkpoint::version)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    auto hlen = take<std::uint64_t>(bytes, pos, "header length");
    if (bytes.size() - pos < hlen) throw CheckpointError("checkpoint truncated in header");
    json header;
    try {
        header = json::parse(bytes.substr(pos, hlen));
    } catch (const json::parse_error& e) {
        throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
    }
    pos += hlen;
    const std::string_view payload = bytes.substr(pos);

    Checkpoint ck;
    try {
        ck.config = train_config_from_json(header.at("config"));
        ck.model.schedule = schedule_from_json(header.at("schedule"));
        ck.model.unet.config = denoiser_config_from_json(header.at("denoiser"));
        ck.model.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
        ck.concept_names = header.at("concept_names").get<std::vector<std::string>>();
        ck.phase1_steps = header.at("phase1_steps").get<std::size_t>();
        ck.phase2_steps = header.at("phase2_steps").get<std::size_t>();

        std::map<std::string, Tensor> tensors;
        for (const auto& b : header.at("blobs")) {
            auto shape = b.at("shape").get<Shape>();
            auto offset = b.at("offset").get<std::uint64_t>();
            auto count = b.at("count").get<std::uint64_t>();
            if ((offset + count) * sizeof(double) > payload.size())
                throw CheckpointError("blob " + b.at("name").get<std::string>() + " runs past the end of the file");
            std::vector<double> v(count);
            std::memcpy(v.data(), payload.data() + offset * sizeof(double), count * sizeof(double));
            tensors.emplace(b.at("name").get<std::string>(), Tensor(shape, std::move(v)));
        }
        for (const auto& h : header.at("handles")) {
            auto name = h.at("name").get<std::string>();
            auto it = tensors.find(HandleTable::param_name(name));
            if (it == tensors.end()) throw CheckpointError("missing embedding for handle " + name);
            ck.model.handles.insert(ck.model.vocab, name, it->second, h.at("background").get<bool>());
            if (ck.model.handles.find(name)->token != h.at("token").get<TokenId>())
                throw CheckpointError("token id mismatch for handle " + name);
        }
        std::size_t used = 0;
        auto fill = [&](const std::string& name, Tensor& t) {
            auto it = tensors.find(name);
            if (it == tensors.end()) throw CheckpointError("missing tensor " + name);
            t = it->second;
            ++used;
        };
        ck.model.text.visit(fill);
        ck.model.unet.visit(fill);
        used += ck.model.handles.size();
        if (used != tensors.size()) throw CheckpointError("checkpoint has tensors the model does not use");
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
    }
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + path.string());
    std::string bytes = encode_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_checkpoint(bytes);
}

}  // namespace decomp
