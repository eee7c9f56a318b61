#include "mgpde/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mgpde/rng.hpp"
#include "mgpde/sha256.hpp"

namespace mgpde {

namespace {

using json = nlohmann::json;

bool is_power_of_two(std::int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

std::vector<std::int64_t> kernel_shape(const ConvBlock& b, int rank) {
    std::vector<std::int64_t> s;
    if (b.transpose) {
        s = {b.in_channels, b.out_channels};
    } else {
        s = {b.out_channels, b.in_channels};
    }
    for (int i = 0; i < rank; ++i) s.push_back(b.kernel);
    return s;
}

void init_block(ConvBlock& b, int rank, Rng& rng) {
    b.weight = Tensor(kernel_shape(b, rank));
    double fan_in = static_cast<double>(b.in_channels) * std::pow(b.kernel, rank);
    double bound = std::sqrt(6.0 / fan_in);
    double* w = b.weight.data();
    for (std::int64_t i = 0; i < b.weight.numel(); ++i) w[i] = rng.uniform(-bound, bound);
    b.bias = Tensor({b.out_channels});
    if (b.has_bn) {
        b.gamma = Tensor::full({b.out_channels}, 1.0);
        b.beta = Tensor({b.out_channels});
        b.bn = BNState::make(b.out_channels);
    }
}

ConvBlock make_block(bool transpose, std::int64_t cin, std::int64_t cout, int kernel, int stride,
                     int padding, bool bn, bool act) {
    ConvBlock b;
    b.transpose = transpose;
    b.in_channels = cin;
    b.out_channels = cout;
    b.kernel = kernel;
    b.stride = stride;
    b.padding = padding;
    b.has_bn = bn;
    b.has_act = act;
    return b;
}

template <typename BlockFn>
void for_each_block(ModelState& m, BlockFn&& fn) {
    for (auto& b : m.encoder) fn(b);
    for (int lvl = m.spec.depth - 1; lvl >= 0; --lvl) {
        for (auto& b : m.up[static_cast<std::size_t>(lvl)]) fn(b);
        fn(m.fuse[static_cast<std::size_t>(lvl)]);
    }
    fn(m.head);
}

template <typename BlockFn>
void for_each_block(const ModelState& m, BlockFn&& fn) {
    for (const auto& b : m.encoder) fn(b);
    for (int lvl = m.spec.depth - 1; lvl >= 0; --lvl) {
        for (const auto& b : m.up[static_cast<std::size_t>(lvl)]) fn(b);
        fn(m.fuse[static_cast<std::size_t>(lvl)]);
    }
    fn(m.head);
}

ConvBlock clone_block(const ConvBlock& b) {
    ConvBlock c = b;
    c.weight = b.weight.clone();
    c.bias = b.bias.clone();
    if (b.has_bn) {
        c.gamma = b.gamma.clone();
        c.beta = b.beta.clone();
        c.bn.running_mean = b.bn.running_mean.clone();
        c.bn.running_var = b.bn.running_var.clone();
    }
    return c;
}

Tensor run_block(ConvBlock& b, const Tensor& x, const UNetSpec& spec, bool training, Tape* tape,
                 const StatReducer* sync) {
    Tensor y = b.transpose ? conv_transpose(x, b.weight, b.bias, b.stride, b.padding, tape)
                           : conv(x, b.weight, b.bias, b.stride, b.padding, tape);
    if (b.has_bn) {
        y = batchnorm(y, b.gamma, b.beta, b.bn, training, kBatchNormMomentum, tape, sync);
    }
    if (b.has_act) y = leaky_relu(y, spec.leaky_slope, tape);
    return y;
}

}  // namespace

void UNetSpec::validate() const {
    if (depth < 1) throw Error::config("unet depth must be >= 1");
    if (base_filters < 1) throw Error::config("unet base_filters must be >= 1");
    if (spatial_rank != 2 && spatial_rank != 3) {
        throw Error::config("unet spatial_rank must be 2 or 3");
    }
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw Error::config("unet kernel_size must be odd, got " + std::to_string(kernel_size));
    }
}

std::string ModelState::fingerprint() const {
    std::ostringstream os;
    os << "unet;d=" << spec.depth << ";b=" << spec.base_filters << ";r=" << spec.spatial_rank
       << ";k=" << spec.kernel_size << ";s=" << spec.leaky_slope << ";adapt=";
    for (auto s : adaptation_history) os << s << ",";
    std::string key = os.str();
    return Sha256::hex(key);
}

std::int64_t ModelState::parameter_count() const {
    std::int64_t n = 0;
    for_each_block(*this, [&](const ConvBlock& b) {
        n += b.weight.numel() + b.bias.numel();
        if (b.has_bn) n += b.gamma.numel() + b.beta.numel();
    });
    return n;
}

std::vector<Tensor*> ModelState::parameters() {
    std::vector<Tensor*> out;
    for_each_block(*this, [&](ConvBlock& b) {
        out.push_back(&b.weight);
        out.push_back(&b.bias);
        if (b.has_bn) {
            out.push_back(&b.gamma);
            out.push_back(&b.beta);
        }
    });
    return out;
}

std::vector<const Tensor*> ModelState::parameters() const {
    std::vector<const Tensor*> out;
    for_each_block(*this, [&](const ConvBlock& b) {
        out.push_back(&b.weight);
        out.push_back(&b.bias);
        if (b.has_bn) {
            out.push_back(&b.gamma);
            out.push_back(&b.beta);
        }
    });
    return out;
}

std::vector<BNState*> ModelState::bn_states() {
    std::vector<BNState*> out;
    for_each_block(*this, [&](ConvBlock& b) {
        if (b.has_bn) out.push_back(&b.bn);
    });
    return out;
}

std::vector<const BNState*> ModelState::bn_states() const {
    std::vector<const BNState*> out;
    for_each_block(*this, [&](const ConvBlock& b) {
        if (b.has_bn) out.push_back(&b.bn);
    });
    return out;
}

std::vector<double> ModelState::flatten_parameters() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(parameter_count()));
    for (const Tensor* t : parameters()) flat.insert(flat.end(), t->data(), t->data() + t->numel());
    return flat;
}

void ModelState::unflatten_parameters(const std::vector<double>& flat) {
    std::size_t off = 0;
    for (Tensor* t : parameters()) {
        if (off + static_cast<std::size_t>(t->numel()) > flat.size()) {
            throw Error::shape("unflatten: buffer too short for parameter layout");
        }
        std::memcpy(t->data(), flat.data() + off, static_cast<std::size_t>(t->numel()) * sizeof(double));
        off += static_cast<std::size_t>(t->numel());
    }
    if (off != flat.size()) throw Error::shape("unflatten: buffer length mismatch");
}

std::string ModelState::weights_digest() const {
    Sha256 h;
    for (const Tensor* t : parameters()) {
        h.update(t->data(), static_cast<std::size_t>(t->numel()) * sizeof(double));
    }
    for (const BNState* s : bn_states()) {
        h.update(s->running_mean.data(), static_cast<std::size_t>(s->running_mean.numel()) * sizeof(double));
        h.update(s->running_var.data(), static_cast<std::size_t>(s->running_var.numel()) * sizeof(double));
    }
    auto digest = h.finish();
    static const char* k = "0123456789abcdef";
    std::string s(64, '0');
    for (int i = 0; i < 32; ++i) {
        s[static_cast<std::size_t>(2 * i)] = k[digest[static_cast<std::size_t>(i)] >> 4];
        s[static_cast<std::size_t>(2 * i + 1)] = k[digest[static_cast<std::size_t>(i)] & 0xf];
    }
    return s;
}

ModelState ModelState::clone() const {
    ModelState c;
    c.spec = spec;
    c.adaptation_history = adaptation_history;
    for (const auto& b : encoder) c.encoder.push_back(clone_block(b));
    for (const auto& lvl : up) {
        std::vector<ConvBlock> chain;
        for (const auto& b : lvl) chain.push_back(clone_block(b));
        c.up.push_back(std::move(chain));
    }
    for (const auto& b : fuse) c.fuse.push_back(clone_block(b));
    c.head = clone_block(head);
    return c;
}

ModelState build_unet(const UNetSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelState m;
    m.spec = spec;
    int k = spec.kernel_size;
    int pad = (k - 1) / 2;

    std::vector<std::int64_t> ch(static_cast<std::size_t>(spec.depth));
    for (int d = 0; d < spec.depth; ++d)
        ch[static_cast<std::size_t>(d)] = static_cast<std::int64_t>(spec.base_filters) << d;

    for (int d = 0; d < spec.depth; ++d) {
        std::int64_t cin = d == 0 ? 1 : ch[static_cast<std::size_t>(d - 1)];
        m.encoder.push_back(make_block(false, cin, ch[static_cast<std::size_t>(d)], k, 1, pad, true, true));
    }
    m.up.resize(static_cast<std::size_t>(spec.depth));
    m.fuse.resize(static_cast<std::size_t>(spec.depth));
    std::int64_t cur = ch[static_cast<std::size_t>(spec.depth - 1)];
    for (int lvl = spec.depth - 1; lvl >= 0; --lvl) {
        std::int64_t target = ch[static_cast<std::size_t>(lvl)];
        m.up[static_cast<std::size_t>(lvl)] = {make_block(true, cur, target, 2, 2, 0, true, true)};
        m.fuse[static_cast<std::size_t>(lvl)] =
            make_block(false, 2 * target, target, k, 1, pad, true, true);
        cur = target;
    }
    m.head = make_block(false, ch[0], 1, k, 1, pad, false, false);

    Rng rng(seed);
    for_each_block(m, [&](ConvBlock& b) { init_block(b, spec.spatial_rank, rng); });
    return m;
}

ModelState adapt_unet(const ModelState& state, std::uint64_t seed) {
    state.spec.validate();
    ModelState m = state.clone();

    auto& chain = m.up[0];
    int pos = -1;
    for (std::size_t i = 0; i < chain.size(); ++i) {
        if (chain[i].transpose && chain[i].stride == 2) pos = static_cast<int>(i);
    }
    if (pos < 0) {
        throw Error::config("adapt: no stride-2 transpose conv left in the decoder");
    }
    std::int64_t cin = chain[static_cast<std::size_t>(pos)].in_channels;
    std::int64_t cout = chain[static_cast<std::size_t>(pos)].out_channels;

    int k = m.spec.kernel_size;
    int pad = (k - 1) / 2;
    // One conv plus two transpose convs in place of the removed upsample; the
    // stride-1 members preserve shape, so the stage still upsamples by two.
    ConvBlock c0 = make_block(false, cin, cin, k, 1, pad, true, true);
    ConvBlock t2 = make_block(true, cin, cout, 2, 2, 0, true, true);
    ConvBlock t1 = make_block(true, cout, cout, k, 1, pad, true, true);
    Rng rng(seed);
    init_block(c0, m.spec.spatial_rank, rng);
    init_block(t2, m.spec.spatial_rank, rng);
    init_block(t1, m.spec.spatial_rank, rng);

    chain.erase(chain.begin() + pos);
    chain.insert(chain.begin() + pos, std::move(t1));
    chain.insert(chain.begin() + pos, std::move(t2));
    chain.insert(chain.begin() + pos, std::move(c0));
    m.adaptation_history.push_back(seed);
    return m;
}

Tensor unet_forward(ModelState& state, const Tensor& nu_batch, bool training, Tape* tape,
                    const StatReducer* sync) {
    const UNetSpec& spec = state.spec;
    spec.validate();
    int want_rank = spec.spatial_rank + 2;
    if (nu_batch.rank() != want_rank) {
        throw Error::shape("forward: expected rank " + std::to_string(want_rank) + " input, got " +
                           std::to_string(nu_batch.rank()));
    }
    if (nu_batch.dim(1) != 1) {
        throw Error::shape("forward: input must have 1 channel at axis 1, got " +
                           std::to_string(nu_batch.dim(1)));
    }
    std::int64_t n = nu_batch.dim(2);
    for (int i = 2; i < nu_batch.rank(); ++i) {
        if (nu_batch.dim(i) != n) {
            throw Error::shape("forward: spatial extents must be equal, axis " + std::to_string(i) +
                               " has " + std::to_string(nu_batch.dim(i)) + " vs " + std::to_string(n));
        }
    }
    if (!is_power_of_two(n) || n < spec.min_resolution()) {
        throw Error::shape("forward: spatial extent " + std::to_string(n) +
                           " must be a power of two >= " + std::to_string(spec.min_resolution()));
    }

    Tensor x = nu_batch;
    std::vector<Tensor> skips(static_cast<std::size_t>(spec.depth));
    for (int d = 0; d < spec.depth; ++d) {
        x = run_block(state.encoder[static_cast<std::size_t>(d)], x, spec, training, tape, sync);
        skips[static_cast<std::size_t>(d)] = x;
        x = downsample2(x, PoolMode::Mean, tape);
    }
    for (int lvl = spec.depth - 1; lvl >= 0; --lvl) {
        for (auto& blk : state.up[static_cast<std::size_t>(lvl)]) {
            x = run_block(blk, x, spec, training, tape, sync);
        }
        const Tensor& skip = skips[static_cast<std::size_t>(lvl)];
        for (int i = 2; i < x.rank(); ++i) {
            if (x.dim(i) != skip.dim(i)) {
                throw Error::shape("forward: skip connection extent mismatch at level " +
                                   std::to_string(lvl) + ", axis " + std::to_string(i));
            }
        }
        x = concat_channels(x, skip, tape);
        x = run_block(state.fuse[static_cast<std::size_t>(lvl)], x, spec, training, tape, sync);
    }
    x = conv(x, state.head.weight, state.head.bias, 1, state.head.padding, tape);
    return sigmoid(x, tape);
}

void save_checkpoint(const ModelState& state, const std::string& path) {
    json header;
    header["version"] = 1;
    header["spec"] = {{"depth", state.spec.depth},
                      {"base_filters", state.spec.base_filters},
                      {"spatial_rank", state.spec.spatial_rank},
                      {"leaky_slope", state.spec.leaky_slope},
                      {"kernel_size", state.spec.kernel_size}};
    header["fingerprint"] = state.fingerprint();
    header["adaptation_history"] = state.adaptation_history;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error::io("cannot open checkpoint for writing: " + path);
    f.write("MGCK", 4);
    std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    unsigned char lb[4] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8),
                           static_cast<unsigned char>(len >> 16),
                           static_cast<unsigned char>(len >> 24)};
    f.write(reinterpret_cast<const char*>(lb), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const Tensor* t : state.parameters()) {
        f.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->numel() * 8));
    }
    for (const BNState* s : state.bn_states()) {
        f.write(reinterpret_cast<const char*>(s->running_mean.data()),
                static_cast<std::streamsize>(s->running_mean.numel() * 8));
        f.write(reinterpret_cast<const char*>(s->running_var.data()),
                static_cast<std::streamsize>(s->running_var.numel() * 8));
    }
    if (!f) throw Error::io("checkpoint write failed: " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error::io("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "MGCK", 4) != 0) {
        throw Error::io("bad checkpoint magic in " + path);
    }
    unsigned char lb[4];
    f.read(reinterpret_cast<char*>(lb), 4);
    if (!f) throw Error::io("truncated checkpoint header length in " + path);
    std::uint32_t len = lb[0] | (lb[1] << 8) | (lb[2] << 16) | (std::uint32_t(lb[3]) << 24);
    std::string hs(len, '\0');
    f.read(hs.data(), len);
    if (!f) throw Error::io("truncated checkpoint header in " + path);

    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw Error::io("invalid checkpoint header JSON: " + std::string(e.what()));
    }
    if (header.value("version", 0) != 1) throw Error::io("unsupported checkpoint version");
    UNetSpec spec;
    spec.depth = header["spec"]["depth"].get<int>();
    spec.base_filters = header["spec"]["base_filters"].get<int>();
    spec.spatial_rank = header["spec"]["spatial_rank"].get<int>();
    spec.leaky_slope = header["spec"]["leaky_slope"].get<double>();
    spec.kernel_size = header["spec"]["kernel_size"].get<int>();
    std::vector<std::uint64_t> history =
        header.value("adaptation_history", std::vector<std::uint64_t>{});

    // Rebuild the architecture, then overwrite every value from the payload.
    ModelState m = build_unet(spec, 0);
    for (std::uint64_t s : history) m = adapt_unet(m, s);
    if (m.fingerprint() != header.value("fingerprint", "")) {
        throw Error::io("checkpoint fingerprint does not match its architecture header");
    }
    auto read_block = [&](double* dst, std::int64_t count) {
        f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * 8));
        if (!f) throw Error::io("truncated checkpoint payload in " + path);
    };
    for (Tensor* t : m.parameters()) read_block(t->data(), t->numel());
    for (BNState* s : m.bn_states()) {
        read_block(s->running_mean.data(), s->running_mean.numel());
        read_block(s->running_var.data(), s->running_var.numel());
    }
    return m;
}

}  // namespace mgpde
