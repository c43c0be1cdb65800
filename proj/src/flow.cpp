#include "hemosbi/flow.hpp"

#include "hemosbi/waveform.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace hemosbi {

using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using RowMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace {
constexpr double half_log_2pi = 0.91893853320467274178;
constexpr char checkpoint_magic[8] = {'H', 'S', 'B', 'I', 'F', 'L', 'O', 'W'};
constexpr std::uint32_t checkpoint_version = 1;
} // namespace

std::size_t ParameterSet::add(const std::string& name, std::vector<int> shape)
{
    Tensor t;
    t.name = name;
    t.size = 1;
    for (int s : shape)
        t.size *= static_cast<std::size_t>(s);
    t.shape = std::move(shape);
    t.offset = values_.size();
    values_.resize(values_.size() + t.size, 0.0);
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
}

std::size_t ParameterSet::find(const std::string& name) const
{
    for (std::size_t i = 0; i < tensors_.size(); ++i)
        if (tensors_[i].name == name)
            return i;
    throw ShapeError("no tensor named " + name);
}

double GradientBundle::norm() const
{
    double s = 0.0;
    for (double v : values)
        s += v * v;
    return std::sqrt(s);
}

bool GradientBundle::finite() const
{
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

EncoderConfig EncoderConfig::standard(double width)
{
    auto ch = [&](int c) { return std::max(1, static_cast<int>(std::lround(c * width))); };
    EncoderConfig e;
    e.layers = {{EncoderLayer::conv, ch(40), 3, 2}, {EncoderLayer::conv, ch(40), 3, 2},
                {EncoderLayer::conv, ch(40), 3, 2}, {EncoderLayer::pool, 0, 3, 3},
                {EncoderLayer::conv, ch(20), 3, 2}, {EncoderLayer::conv, ch(10), 3, 2}};
    return e;
}

EncoderConfig EncoderConfig::identity(int input_length)
{
    EncoderConfig e;
    e.input_length = input_length;
    return e;
}

std::vector<int> EncoderConfig::lengths() const
{
    std::vector<int> out = {input_length};
    for (const auto& l : layers) {
        const int len = (out.back() - l.kernel) / l.stride + 1;
        if (out.back() < l.kernel || len < 1)
            throw ShapeError("encoder layer has no output for input length " + std::to_string(out.back()));
        out.push_back(len);
    }
    return out;
}

int EncoderConfig::output_dim() const
{
    int channels = 1;
    for (const auto& l : layers)
        if (l.kind == EncoderLayer::conv)
            channels = l.channels;
    return channels * lengths().back();
}

FlowConfig FlowConfig::standard(int dim, double width, std::uint64_t seed)
{
    FlowConfig c;
    c.dim = dim;
    c.encoder = EncoderConfig::standard(width);
    c.hidden_width = std::max(2, static_cast<int>(std::lround(350 * width)));
    c.seed = seed;
    return c;
}

FlowConfig FlowConfig::toy(int dim, int input_length, int hidden_width, std::uint64_t seed)
{
    FlowConfig c;
    c.dim = dim;
    c.encoder = EncoderConfig::identity(input_length);
    c.hidden_width = hidden_width;
    c.seed = seed;
    return c;
}

json FlowConfig::to_json() const
{
    json layers = json::array();
    for (const auto& l : encoder.layers)
        layers.push_back({{"kind", l.kind == EncoderLayer::conv ? "conv" : "pool"},
                          {"channels", l.channels},
                          {"kernel", l.kernel},
                          {"stride", l.stride}});
    return {{"dim", dim},
            {"input_length", encoder.input_length},
            {"encoder", layers},
            {"hidden_width", hidden_width},
            {"hidden_layers", hidden_layers},
            {"steps", steps},
            {"sigma_clamp", sigma_clamp},
            {"seed", seed}};
}

FlowConfig FlowConfig::from_json(const json& j)
{
    FlowConfig c;
    c.dim = j.at("dim").get<int>();
    c.encoder.input_length = j.at("input_length").get<int>();
    c.encoder.layers.clear();
    for (const auto& l : j.at("encoder")) {
        EncoderLayer e;
        e.kind = l.at("kind").get<std::string>() == "conv" ? EncoderLayer::conv : EncoderLayer::pool;
        e.channels = l.at("channels").get<int>();
        e.kernel = l.at("kernel").get<int>();
        e.stride = l.at("stride").get<int>();
        c.encoder.layers.push_back(e);
    }
    c.hidden_width = j.at("hidden_width").get<int>();
    c.hidden_layers = j.at("hidden_layers").get<int>();
    c.steps = j.at("steps").get<int>();
    c.sigma_clamp = j.at("sigma_clamp").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

ConditionalFlow::ConditionalFlow(FlowConfig cfg) : cfg_(std::move(cfg))
{
    if (cfg_.dim < 1 || cfg_.steps < 1 || cfg_.hidden_layers < 1 || cfg_.hidden_width < 1)
        throw ConfigError("flow needs dim, steps, hidden layers and width >= 1");
    const int k = cfg_.dim;
    const int d = conditioning_dim();
    const int H = cfg_.hidden_width;
    auto rng = make_rng(cfg_.seed, {stream::init});

    int in_ch = 1;
    for (std::size_t l = 0; l < cfg_.encoder.layers.size(); ++l) {
        const auto& layer = cfg_.encoder.layers[l];
        if (layer.kind != EncoderLayer::conv)
            continue;
        const auto name = "encoder.conv" + std::to_string(conv_w_.size());
        conv_w_.push_back(params_.add(name + ".weight", {layer.channels, in_ch, layer.kernel}));
        conv_b_.push_back(params_.add(name + ".bias", {layer.channels}));
        in_ch = layer.channels;
    }

    // Autoregressive degrees: phi_i has degree i + 1, conditioning inputs 0,
    // hidden unit u has degree u mod k, output i (mu_i and sigma_i) degree i + 1.
    std::vector<int> in_deg(k + d, 0);
    for (int i = 0; i < k; ++i)
        in_deg[i] = i + 1;
    std::vector<int> hid_deg(H);
    for (int u = 0; u < H; ++u)
        hid_deg[u] = u % k;
    std::vector<int> out_deg(2 * k);
    for (int i = 0; i < k; ++i)
        out_deg[i] = out_deg[k + i] = i + 1;

    for (int s = 0; s < cfg_.steps; ++s) {
        made_w_.emplace_back();
        made_b_.emplace_back();
        for (int l = 0; l <= cfg_.hidden_layers; ++l) {
            const bool out = l == cfg_.hidden_layers;
            const auto& prev = l == 0 ? in_deg : hid_deg;
            const auto& next = out ? out_deg : hid_deg;
            const int rows = static_cast<int>(next.size());
            const int cols = static_cast<int>(prev.size());
            MatrixXd mask(rows, cols);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    mask(r, c) = out ? (prev[c] < next[r]) : (prev[c] <= next[r]);
            masks_.push_back(mask);
            const auto name = "flow" + std::to_string(s) + (out ? ".out" : ".hidden" + std::to_string(l));
            made_w_.back().push_back(params_.add(name + ".weight", {rows, cols}));
            made_b_.back().push_back(params_.add(name + ".bias", {rows}));
        }
        std::vector<int> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        auto prng = make_rng(cfg_.seed, {stream::init, 1, static_cast<std::uint64_t>(s)});
        std::shuffle(perm.begin(), perm.end(), prng);
        perms_.push_back(perm);
    }

    trainable_.assign(params_.size(), 1);
    for (std::size_t c = 0; c < conv_w_.size(); ++c) {
        const auto& t = params_.tensor(conv_w_[c]);
        std::normal_distribution<double> he(0.0, std::sqrt(2.0 / (t.shape[1] * t.shape[2])));
        double* w = params_.data(conv_w_[c]);
        for (std::size_t i = 0; i < t.size; ++i)
            w[i] = he(rng);
    }
    for (int s = 0; s < cfg_.steps; ++s)
        for (int l = 0; l <= cfg_.hidden_layers; ++l) {
            const auto idx = made_w_[s][l];
            const auto& t = params_.tensor(idx);
            const auto& mask = masks_[s * (cfg_.hidden_layers + 1) + l];
            const bool out = l == cfg_.hidden_layers;
            std::normal_distribution<double> he(0.0, std::sqrt(2.0 / t.shape[1]));
            double* w = params_.data(idx);
            for (int r = 0; r < t.shape[0]; ++r)
                for (int c = 0; c < t.shape[1]; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * t.shape[1] + c;
                    const double draw = he(rng);
                    w[i] = (!out && mask(r, c) != 0.0) ? draw : 0.0;
                    trainable_[t.offset + i] = mask(r, c) != 0.0;
                }
        }

    param_mean.assign(k, 0.0);
    param_std.assign(k, 1.0);
}

Vec ConditionalFlow::standardize(std::span<const double> phi) const
{
    Vec u(phi.size());
    for (std::size_t i = 0; i < phi.size(); ++i)
        u[i] = (phi[i] - param_mean[i]) / param_std[i];
    return u;
}

Vec ConditionalFlow::unstandardize(std::span<const double> u) const
{
    Vec phi(u.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        phi[i] = param_mean[i] + param_std[i] * u[i];
    return phi;
}

double ConditionalFlow::log_scale() const
{
    double s = 0.0;
    for (double v : param_std)
        s += std::log(v);
    return s;
}

/// Masked weights gathered once per call, plus forward and reverse passes
/// for a single example.
struct FlowKernel {
    const ConditionalFlow& m;
    std::vector<std::vector<MatrixXd>> W;
    std::vector<std::vector<VectorXd>> b;
    std::vector<int> len;
    int last_conv = -1;

    explicit FlowKernel(const ConditionalFlow& model) : m(model), len(model.cfg_.encoder.lengths())
    {
        const int L = m.cfg_.hidden_layers + 1;
        for (int s = 0; s < m.cfg_.steps; ++s) {
            W.emplace_back();
            b.emplace_back();
            for (int l = 0; l < L; ++l) {
                const auto& t = m.params_.tensor(m.made_w_[s][l]);
                ConstRowMap w(m.params_.data(m.made_w_[s][l]), t.shape[0], t.shape[1]);
                W.back().push_back(w.cwiseProduct(m.masks_[s * L + l]));
                b.back().push_back(Eigen::Map<const VectorXd>(m.params_.data(m.made_b_[s][l]), t.shape[0]));
            }
        }
        for (std::size_t l = 0; l < m.cfg_.encoder.layers.size(); ++l)
            if (m.cfg_.encoder.layers[l].kind == EncoderLayer::conv)
                last_conv = static_cast<int>(l);
    }

    struct EncCache {
        std::vector<Vec> act;  // act[0] input, act[l + 1] output of layer l
        std::vector<int> channels;
        std::vector<std::vector<int>> argmax;
    };

    Vec encode(std::span<const double> x, double age, EncCache* cache) const
    {
        const auto& ec = m.cfg_.encoder;
        if (static_cast<int>(x.size()) != ec.input_length)
            throw ShapeError("observation has " + std::to_string(x.size()) + " samples, the encoder expects "
                             + std::to_string(ec.input_length));
        EncCache local;
        EncCache& c = cache ? *cache : local;
        Vec xn(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            xn[i] = (x[i] - m.obs_stats.mean) / m.obs_stats.std;
        c.act.assign(1, std::move(xn));
        c.channels.assign(1, 1);
        c.argmax.assign(ec.layers.size(), {});
        std::size_t conv_index = 0;
        for (std::size_t l = 0; l < ec.layers.size(); ++l) {
            const auto& layer = ec.layers[l];
            const Vec& in = c.act.back();
            const int cin = c.channels.back();
            const int lin = len[l], lout = len[l + 1];
            if (layer.kind == EncoderLayer::conv) {
                const int cout = layer.channels;
                const double* w = m.params_.data(m.conv_w_[conv_index]);
                const double* bias = m.params_.data(m.conv_b_[conv_index]);
                ++conv_index;
                Vec out(static_cast<std::size_t>(cout) * lout);
                const bool relu = static_cast<int>(l) != last_conv;
                for (int co = 0; co < cout; ++co)
                    for (int t = 0; t < lout; ++t) {
                        double s = bias[co];
                        const int base = t * layer.stride;
                        for (int ci = 0; ci < cin; ++ci) {
                            const double* wr = w + (static_cast<std::size_t>(co) * cin + ci) * layer.kernel;
                            const double* ir = in.data() + static_cast<std::size_t>(ci) * lin + base;
                            for (int kk = 0; kk < layer.kernel; ++kk)
                                s += wr[kk] * ir[kk];
                        }
                        out[static_cast<std::size_t>(co) * lout + t] = relu ? std::max(s, 0.0) : s;
                    }
                c.act.push_back(std::move(out));
                c.channels.push_back(cout);
            } else {
                Vec out(static_cast<std::size_t>(cin) * lout);
                auto& am = c.argmax[l];
                am.assign(out.size(), 0);
                for (int ch = 0; ch < cin; ++ch)
                    for (int t = 0; t < lout; ++t) {
                        const std::size_t base = static_cast<std::size_t>(ch) * lin + t * layer.stride;
                        std::size_t best = base;
                        for (int kk = 1; kk < layer.kernel; ++kk)
                            if (in[base + kk] > in[best])
                                best = base + kk;
                        out[static_cast<std::size_t>(ch) * lout + t] = in[best];
                        am[static_cast<std::size_t>(ch) * lout + t] = static_cast<int>(best);
                    }
                c.act.push_back(std::move(out));
                c.channels.push_back(cin);
            }
        }
        Vec h = c.act.back();
        h.push_back((age - m.age_stats.mean) / m.age_stats.std);
        return h;
    }

    void encode_backward(const EncCache& c, Vec dout, double* grad) const
    {
        const auto& ec = m.cfg_.encoder;
        std::size_t conv_index = m.conv_w_.size();
        for (int l = static_cast<int>(ec.layers.size()) - 1; l >= 0; --l) {
            const auto& layer = ec.layers[l];
            const Vec& in = c.act[l];
            const Vec& out = c.act[l + 1];
            const int cin = c.channels[l];
            const int lin = len[l], lout = len[l + 1];
            Vec din(in.size(), 0.0);
            if (layer.kind == EncoderLayer::conv) {
                --conv_index;
                const int cout = layer.channels;
                const double* w = m.params_.data(m.conv_w_[conv_index]);
                double* gw = grad + m.params_.tensor(m.conv_w_[conv_index]).offset;
                double* gb = grad + m.params_.tensor(m.conv_b_[conv_index]).offset;
                const bool relu = l != last_conv;
                const bool need_din = l > 0;
                for (int co = 0; co < cout; ++co)
                    for (int t = 0; t < lout; ++t) {
                        const std::size_t oi = static_cast<std::size_t>(co) * lout + t;
                        double dz = dout[oi];
                        if (relu && out[oi] <= 0.0)
                            dz = 0.0;
                        if (dz == 0.0)
                            continue;
                        gb[co] += dz;
                        const int base = t * layer.stride;
                        for (int ci = 0; ci < cin; ++ci) {
                            const std::size_t wo = (static_cast<std::size_t>(co) * cin + ci) * layer.kernel;
                            const std::size_t io = static_cast<std::size_t>(ci) * lin + base;
                            for (int kk = 0; kk < layer.kernel; ++kk) {
                                gw[wo + kk] += dz * in[io + kk];
                                if (need_din)
                                    din[io + kk] += dz * w[wo + kk];
                            }
                        }
                    }
            } else {
                const auto& am = c.argmax[l];
                for (std::size_t i = 0; i < dout.size(); ++i)
                    din[am[i]] += dout[i];
            }
            dout = std::move(din);
        }
    }

    struct MadeCache {
        std::vector<VectorXd> a;  // a[0] input, a[l + 1] hidden activations
        std::vector<VectorXd> z;  // hidden pre-activations
    };

    VectorXd made(int s, const VectorXd& input, MadeCache* cache) const
    {
        const int L = m.cfg_.hidden_layers;
        VectorXd a = input;
        if (cache) {
            cache->a.assign(1, input);
            cache->z.clear();
        }
        for (int l = 0; l < L; ++l) {
            VectorXd z = W[s][l] * a + b[s][l];
            a = z.cwiseMax(0.0);
            if (cache) {
                cache->z.push_back(std::move(z));
                cache->a.push_back(a);
            }
        }
        return W[s][L] * a + b[s][L];
    }

    /// Accumulates weight gradients (unmasked; the caller masks) and
    /// returns d loss / d input.
    VectorXd made_backward(int s, const MadeCache& c, const VectorXd& dout, double* grad) const
    {
        const int L = m.cfg_.hidden_layers;
        VectorXd delta = dout;
        for (int l = L; l >= 0; --l) {
            const auto& tw = m.params_.tensor(m.made_w_[s][l]);
            RowMap gw(grad + tw.offset, tw.shape[0], tw.shape[1]);
            gw.noalias() += delta * c.a[l].transpose();
            Eigen::Map<VectorXd>(grad + m.params_.tensor(m.made_b_[s][l]).offset, tw.shape[0]) += delta;
            VectorXd da = W[s][l].transpose() * delta;
            if (l > 0)
                delta = da.cwiseProduct((c.z[l - 1].array() > 0.0).cast<double>().matrix());
            else
                delta = std::move(da);
        }
        return delta;
    }

    VectorXd step_input(const VectorXd& x, std::span<const double> h) const
    {
        VectorXd in(x.size() + static_cast<Eigen::Index>(h.size()));
        in.head(x.size()) = x;
        for (std::size_t j = 0; j < h.size(); ++j)
            in[x.size() + static_cast<Eigen::Index>(j)] = h[j];
        return in;
    }

    struct StepCache {
        VectorXd x;
        VectorXd sigma_raw;
        VectorXd sigma;
        MadeCache made;
    };

    FlowForward forward(std::span<const double> u0, std::span<const double> h, std::vector<StepCache>* caches) const
    {
        const int k = m.cfg_.dim;
        if (static_cast<int>(u0.size()) != k)
            throw ShapeError("flow expects " + std::to_string(k) + " parameters");
        VectorXd x = Eigen::Map<const VectorXd>(u0.data(), k);
        double logdet = 0.0;
        if (caches)
            caches->resize(m.cfg_.steps);
        for (int s = 0; s < m.cfg_.steps; ++s) {
            MadeCache mc;
            const VectorXd out = made(s, step_input(x, h), caches ? &mc : nullptr);
            const VectorXd sigma_raw = out.tail(k);
            const VectorXd sigma = sigma_raw.cwiseMax(-m.cfg_.sigma_clamp).cwiseMin(m.cfg_.sigma_clamp);
            const VectorXd u = x.cwiseProduct(sigma.array().exp().matrix()) + out.head(k);
            if (!u.allFinite())
                throw NumericError("non-finite value in flow step " + std::to_string(s));
            logdet += sigma.sum();
            if (caches) {
                auto& c = (*caches)[s];
                c.x = x;
                c.sigma_raw = sigma_raw;
                c.sigma = sigma;
                c.made = std::move(mc);
            }
            const auto& perm = m.perms_[s];
            for (int j = 0; j < k; ++j)
                x[j] = u[perm[j]];
        }
        FlowForward f;
        f.z.assign(x.data(), x.data() + k);
        f.logdet = logdet;
        return f;
    }

    Vec inverse(std::span<const double> z, std::span<const double> h) const
    {
        const int k = m.cfg_.dim;
        if (static_cast<int>(z.size()) != k)
            throw ShapeError("flow expects " + std::to_string(k) + " latent coordinates");
        VectorXd y = Eigen::Map<const VectorXd>(z.data(), k);
        for (int s = m.cfg_.steps - 1; s >= 0; --s) {
            VectorXd u(k);
            const auto& perm = m.perms_[s];
            for (int j = 0; j < k; ++j)
                u[perm[j]] = y[j];
            VectorXd x = VectorXd::Zero(k);
            VectorXd in = step_input(x, h);
            for (int i = 0; i < k; ++i) {
                const VectorXd out = made(s, in, nullptr);
                const double sigma = std::clamp(out[k + i], -m.cfg_.sigma_clamp, m.cfg_.sigma_clamp);
                x[i] = (u[i] - out[i]) * std::exp(-sigma);
                in[i] = x[i];
            }
            if (!x.allFinite())
                throw NumericError("non-finite value inverting flow step " + std::to_string(s));
            y = x;
        }
        return Vec(y.data(), y.data() + k);
    }

    /// Negative log density of one example; adds weight * gradient to grad.
    double example(const TrainingExample& ex, double weight, double* grad) const
    {
        const int k = m.cfg_.dim;
        EncCache ec;
        const Vec h = encode(ex.x, ex.age, &ec);
        const Vec u0 = m.standardize(ex.phi);
        std::vector<StepCache> caches;
        const auto f = forward(u0, h, &caches);
        double nll = m.log_scale() - f.logdet + k * half_log_2pi;
        for (double v : f.z)
            nll += 0.5 * v * v;
        if (!std::isfinite(nll))
            return nll;

        VectorXd dy = weight * Eigen::Map<const VectorXd>(f.z.data(), k);
        VectorXd dh = VectorXd::Zero(static_cast<Eigen::Index>(h.size()));
        for (int s = m.cfg_.steps - 1; s >= 0; --s) {
            const auto& c = caches[s];
            VectorXd du(k);
            const auto& perm = m.perms_[s];
            for (int j = 0; j < k; ++j)
                du[perm[j]] = dy[j];
            const VectorXd e = c.sigma.array().exp().matrix();
            VectorXd dout(2 * k);
            dout.head(k) = du;
            for (int i = 0; i < k; ++i) {
                const bool clamped = std::abs(c.sigma_raw[i]) > m.cfg_.sigma_clamp;
                dout[k + i] = clamped ? 0.0 : du[i] * c.x[i] * e[i] - weight;
            }
            const VectorXd din = made_backward(s, c.made, dout, grad);
            dy = du.cwiseProduct(e) + din.head(k);
            dh += din.tail(static_cast<Eigen::Index>(h.size()));
        }
        if (!m.cfg_.encoder.layers.empty()) {
            Vec demb(dh.data(), dh.data() + dh.size() - 1);
            encode_backward(ec, std::move(demb), grad);
        }
        return nll;
    }
};

Vec ConditionalFlow::encode(std::span<const double> x, double age) const
{
    return FlowKernel(*this).encode(x, age, nullptr);
}

FlowForward ConditionalFlow::forward(std::span<const double> u, std::span<const double> h) const
{
    return FlowKernel(*this).forward(u, h, nullptr);
}

Vec ConditionalFlow::inverse(std::span<const double> z, std::span<const double> h) const
{
    return FlowKernel(*this).inverse(z, h);
}

double ConditionalFlow::log_prob_given(std::span<const double> phi, std::span<const double> h) const
{
    const auto f = FlowKernel(*this).forward(standardize(phi), h, nullptr);
    double lp = f.logdet - log_scale() - dim() * half_log_2pi;
    for (double v : f.z)
        lp -= 0.5 * v * v;
    return lp;
}

double ConditionalFlow::log_prob(std::span<const double> phi, std::span<const double> x, double age) const
{
    return log_prob_given(phi, encode(x, age));
}

Vec ConditionalFlow::log_prob(const std::vector<Vec>& phis, std::span<const double> x, double age) const
{
    const FlowKernel kern(*this);
    const Vec h = kern.encode(x, age, nullptr);
    Vec out;
    out.reserve(phis.size());
    for (const auto& phi : phis) {
        const auto f = kern.forward(standardize(phi), h, nullptr);
        double lp = f.logdet - log_scale() - dim() * half_log_2pi;
        for (double v : f.z)
            lp -= 0.5 * v * v;
        out.push_back(lp);
    }
    return out;
}

MatrixXd ConditionalFlow::sample_given(std::span<const double> h, std::size_t n, Rng& rng) const
{
    const FlowKernel kern(*this);
    const int k = dim();
    MatrixXd out(static_cast<Eigen::Index>(n), k);
    std::normal_distribution<double> normal;
    Vec z(k);
    for (std::size_t r = 0; r < n; ++r) {
        for (auto& v : z)
            v = normal(rng);
        const auto phi = unstandardize(kern.inverse(z, h));
        for (int i = 0; i < k; ++i)
            out(static_cast<Eigen::Index>(r), i) = phi[i];
    }
    return out;
}

MatrixXd ConditionalFlow::sample(std::span<const double> x, double age, std::size_t n, Rng& rng) const
{
    return sample_given(encode(x, age), n, rng);
}

LossGradient loss_and_gradients(const ConditionalFlow& model, std::span<const TrainingExample> batch, Execution exec)
{
    if (batch.empty())
        throw DomainError("loss needs a non-empty batch");
    const std::size_t B = batch.size();
    const std::size_t chunks = std::min<std::size_t>(B, 8);
    const std::size_t P = model.parameters().size();
    const FlowKernel kern(model);
    const double weight = 1.0 / static_cast<double>(B);

    std::vector<Vec> grads(chunks, Vec(P, 0.0));
    Vec losses(chunks, 0.0);
    std::vector<long> bad(chunks, -1);
    for_each_index(chunks, exec, [&](std::size_t c) {
        const std::size_t lo = c * B / chunks, hi = (c + 1) * B / chunks;
        for (std::size_t i = lo; i < hi; ++i) {
            double nll = 0.0;
            try {
                nll = kern.example(batch[i], weight, grads[c].data());
            } catch (const NumericError&) {
                nll = std::numeric_limits<double>::quiet_NaN();
            }
            if (!std::isfinite(nll)) {
                bad[c] = static_cast<long>(i);
                return;
            }
            losses[c] += weight * nll;
        }
    });
    for (std::size_t c = 0; c < chunks; ++c)
        if (bad[c] >= 0)
            throw NumericError("non-finite loss at batch index " + std::to_string(bad[c]));

    LossGradient out;
    out.gradient.values.assign(P, 0.0);
    for (std::size_t c = 0; c < chunks; ++c) {
        out.loss += losses[c];
        for (std::size_t p = 0; p < P; ++p)
            out.gradient.values[p] += grads[c][p];
    }
    const auto& mask = model.trainable();
    for (std::size_t p = 0; p < P; ++p)
        if (!mask[p])
            out.gradient.values[p] = 0.0;
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const ConditionalFlow& model, const json& extra)
{
    json tensors = json::array();
    for (const auto& t : model.parameters().tensors())
        tensors.push_back({{"name", t.name}, {"shape", t.shape}});
    const json header = {{"config", model.config().to_json()},
                         {"tensors", tensors},
                         {"obs_stats", model.obs_stats.to_json()},
                         {"age_stats", model.age_stats.to_json()},
                         {"param_mean", model.param_mean},
                         {"param_std", model.param_std},
                         {"extra", extra}};
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write " + path.string());
    out.write(checkpoint_magic, sizeof checkpoint_magic);
    const std::uint32_t version = checkpoint_version;
    const auto length = static_cast<std::uint64_t>(text.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&length), sizeof length);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_f32_le(out, model.parameters().values().data(), model.parameters().size());
    if (!out)
        throw IoError("failed writing " + path.string());
}

ConditionalFlow load_checkpoint(const std::filesystem::path& path, json* extra)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, checkpoint_magic, sizeof magic) != 0)
        throw IoError(path.string() + " is not a model checkpoint");
    std::uint32_t version = 0;
    std::uint64_t length = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&length), sizeof length);
    if (!in || version != checkpoint_version)
        throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    const auto header = json::parse(text);
    ConditionalFlow model(FlowConfig::from_json(header.at("config")));
    const auto& tensors = header.at("tensors");
    if (tensors.size() != model.parameters().tensors().size())
        throw IoError(path.string() + ": tensor table does not match the configuration");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& t = model.parameters().tensor(i);
        if (tensors[i].at("name").get<std::string>() != t.name
            || tensors[i].at("shape").get<std::vector<int>>() != t.shape)
            throw IoError(path.string() + ": tensor " + t.name + " does not match");
    }
    read_f32_le(in, model.parameters().values().data(), model.parameters().size());
    model.obs_stats = NormalizationStats::from_json(header.at("obs_stats"));
    model.age_stats = NormalizationStats::from_json(header.at("age_stats"));
    model.param_mean = header.at("param_mean").get<Vec>();
    model.param_std = header.at("param_std").get<Vec>();
    if (extra)
        *extra = header.at("extra");
    return model;
}

} // namespace hemosbi
