#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxrpn/core.hpp"
#include "voxrpn/encoding.hpp"
#include "voxrpn/grid.hpp"

namespace voxrpn {

using nlohmann::json;

// dense feature block, channel-major: data[((c*H + k)*L + j)*W + i]
template <class T>
struct VolumeT {
    int C = 0, W = 0, L = 0, H = 0;
    std::vector<T> data;
    std::vector<T> grad;

    VolumeT() = default;
    VolumeT(int c, int w, int l, int h)
        : C(c), W(w), L(l), H(h), data(size_t(c) * w * l * h, T(0)) {}

    size_t spatial() const { return size_t(W) * L * H; }
    size_t size() const { return size_t(C) * spatial(); }
    size_t idx(int c, int i, int j, int k) const {
        return size_t(c) * spatial() + (size_t(k) * L + j) * W + i;
    }
    T& at(int c, int i, int j, int k) { return data[idx(c, i, j, k)]; }
    T at(int c, int i, int j, int k) const { return data[idx(c, i, j, k)]; }
    std::string shape_str() const {
        return "[" + std::to_string(C) + "," + std::to_string(W) + "," + std::to_string(L) + "," +
               std::to_string(H) + "]";
    }
};

// a grid's voxel layout matches the volume layout, so this is a cast
template <class T>
VolumeT<T> grid_to_volume(const VoxelGrid& g) {
    VolumeT<T> v(g.C(), g.W(), g.L(), g.H());
    const std::vector<float>& d = g.data();
    for (size_t i = 0; i < d.size(); ++i) {
        require(std::isfinite(d[i]), "grid_to_volume: non-finite voxel value");
        v.data[i] = T(d[i]);
    }
    return v;
}

// one learnable tensor with its gradient and optimizer moments
template <class T>
struct TensorT {
    std::string name;
    std::vector<int> shape;
    std::vector<T> w, g, m, v;

    size_t size() const { return w.size(); }
    void alloc(size_t n) {
        w.assign(n, T(0));
        g.assign(n, T(0));
        m.assign(n, T(0));
        v.assign(n, T(0));
    }
};

// decoupled weight decay; moment math in double regardless of storage type
template <class T>
void adamw_update(TensorT<T>& t, int64_t step, double lr, double wd, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8) {
    require(step >= 1, "adamw_update: step starts at 1");
    double c1 = 1.0 - std::pow(beta1, double(step));
    double c2 = 1.0 - std::pow(beta2, double(step));
    for (size_t i = 0; i < t.w.size(); ++i) {
        double g = double(t.g[i]);
        double m = beta1 * double(t.m[i]) + (1.0 - beta1) * g;
        double v = beta2 * double(t.v[i]) + (1.0 - beta2) * g * g;
        t.m[i] = T(m);
        t.v[i] = T(v);
        double upd = (m / c1) / (std::sqrt(v / c2) + eps) + wd * double(t.w[i]);
        t.w[i] = T(double(t.w[i]) - lr * upd);
    }
}

namespace detail {

// first/last output index whose receptive tap io*s + d stays inside [0, n);
// the division must floor (negative numerators happen on size-1 axes)
inline int conv_lo(int d, int s) { return d >= 0 ? 0 : (-d + s - 1) / s; }
inline int conv_hi(int d, int s, int n, int n_out) {
    int num = n - 1 - d;
    int h = num >= 0 ? num / s : -((-num + s - 1) / s);
    return h < n_out - 1 ? h : n_out - 1;
}

}  // namespace detail

inline int conv_out_dim(int n, int k, int stride) { return (n + 2 * (k / 2) - k) / stride + 1; }

// plain cross-correlation, zero padding keeps "same" geometry at stride 1
template <class T>
void conv3d_forward(const VolumeT<T>& in, const TensorT<T>& w, const TensorT<T>& b, int stride,
                    VolumeT<T>& out) {
    int cout = w.shape[0], cin = w.shape[1], k = w.shape[2];
    require(in.C == cin, "conv3d: input channels " + std::to_string(in.C) +
                             " do not match weights expecting " + std::to_string(cin) +
                             " (input " + in.shape_str() + ")");
    int p = k / 2;
    out = VolumeT<T>(cout, conv_out_dim(in.W, k, stride), conv_out_dim(in.L, k, stride),
                     conv_out_dim(in.H, k, stride));
    for (int co = 0; co < cout; ++co) {
        T* outc = out.data.data() + size_t(co) * out.spatial();
        std::fill(outc, outc + out.spatial(), b.w[size_t(co)]);
        for (int ci = 0; ci < cin; ++ci) {
            const T* inc = in.data.data() + size_t(ci) * in.spatial();
            const T* wk = w.w.data() + (size_t(co) * cin + ci) * k * k * k;
            for (int kz = 0; kz < k; ++kz) {
                int dz = kz - p;
                int ko0 = detail::conv_lo(dz, stride), ko1 = detail::conv_hi(dz, stride, in.H, out.H);
                for (int ky = 0; ky < k; ++ky) {
                    int dy = ky - p;
                    int jo0 = detail::conv_lo(dy, stride),
                        jo1 = detail::conv_hi(dy, stride, in.L, out.L);
                    for (int kx = 0; kx < k; ++kx) {
                        int dx = kx - p;
                        int io0 = detail::conv_lo(dx, stride),
                            io1 = detail::conv_hi(dx, stride, in.W, out.W);
                        T wv = wk[(kz * k + ky) * k + kx];
                        for (int ko = ko0; ko <= ko1; ++ko) {
                            int zi = ko * stride + dz;
                            for (int jo = jo0; jo <= jo1; ++jo) {
                                int yi = jo * stride + dy;
                                const T* irow = inc + (size_t(zi) * in.L + yi) * in.W + dx;
                                T* orow = outc + (size_t(ko) * out.L + jo) * out.W;
                                if (stride == 1)
                                    for (int io = io0; io <= io1; ++io) orow[io] += wv * irow[io];
                                else
                                    for (int io = io0; io <= io1; ++io)
                                        orow[io] += wv * irow[io * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

// accumulates input, weight and bias gradients from out.grad
template <class T>
void conv3d_backward(VolumeT<T>& in, TensorT<T>& w, TensorT<T>& b, int stride,
                     const VolumeT<T>& out) {
    int cout = w.shape[0], cin = w.shape[1], k = w.shape[2];
    int p = k / 2;
    for (int co = 0; co < cout; ++co) {
        const T* goutc = out.grad.data() + size_t(co) * out.spatial();
        double bacc = 0;
        for (size_t i = 0; i < out.spatial(); ++i) bacc += double(goutc[i]);
        b.g[size_t(co)] += T(bacc);
        for (int ci = 0; ci < cin; ++ci) {
            const T* inc = in.data.data() + size_t(ci) * in.spatial();
            T* ginc = in.grad.data() + size_t(ci) * in.spatial();
            const T* wk = w.w.data() + (size_t(co) * cin + ci) * k * k * k;
            T* gwk = w.g.data() + (size_t(co) * cin + ci) * k * k * k;
            for (int kz = 0; kz < k; ++kz) {
                int dz = kz - p;
                int ko0 = detail::conv_lo(dz, stride), ko1 = detail::conv_hi(dz, stride, in.H, out.H);
                for (int ky = 0; ky < k; ++ky) {
                    int dy = ky - p;
                    int jo0 = detail::conv_lo(dy, stride),
                        jo1 = detail::conv_hi(dy, stride, in.L, out.L);
                    for (int kx = 0; kx < k; ++kx) {
                        int dx = kx - p;
                        int io0 = detail::conv_lo(dx, stride),
                            io1 = detail::conv_hi(dx, stride, in.W, out.W);
                        T wv = wk[(kz * k + ky) * k + kx];
                        double wacc = 0;
                        for (int ko = ko0; ko <= ko1; ++ko) {
                            int zi = ko * stride + dz;
                            for (int jo = jo0; jo <= jo1; ++jo) {
                                int yi = jo * stride + dy;
                                size_t ioff = (size_t(zi) * in.L + yi) * in.W + dx;
                                const T* grow = goutc + (size_t(ko) * out.L + jo) * out.W;
                                if (stride == 1) {
                                    const T* irow = inc + ioff;
                                    T* girow = ginc + ioff;
                                    for (int io = io0; io <= io1; ++io) {
                                        T g = grow[io];
                                        girow[io] += wv * g;
                                        wacc += double(irow[io]) * double(g);
                                    }
                                } else {
                                    for (int io = io0; io <= io1; ++io) {
                                        T g = grow[io];
                                        ginc[ioff + size_t(io) * stride] += wv * g;
                                        wacc += double(inc[ioff + size_t(io) * stride]) * double(g);
                                    }
                                }
                            }
                        }
                        gwk[(kz * k + ky) * k + kx] += T(wacc);
                    }
                }
            }
        }
    }
}

enum class OpKind { Input, Conv, Relu, Sigmoid, Add, Upsample, ExpPrefix };

// flat record-and-replay tape; volumes own both value and gradient buffers
template <class T>
class TapeT {
  public:
    struct Node {
        OpKind kind;
        int a = -1, b = -1, out = -1;
        int pw = -1, pb = -1;  // conv weight/bias tensor ids
        int stride = 1;
    };

    std::vector<VolumeT<T>> vol;
    std::vector<Node> nodes;
    std::vector<TensorT<T>>* tensors = nullptr;
    std::vector<std::string>* notes = nullptr;

    int input(VolumeT<T> v) {
        v.grad.assign(v.size(), T(0));
        vol.push_back(std::move(v));
        nodes.push_back({OpKind::Input, -1, -1, int(vol.size()) - 1, -1, -1, 1});
        return int(vol.size()) - 1;
    }

    int conv(int a, int pw, int pb, int stride) {
        VolumeT<T> out;
        conv3d_forward(vol[size_t(a)], (*tensors)[size_t(pw)], (*tensors)[size_t(pb)], stride, out);
        out.grad.assign(out.size(), T(0));
        vol.push_back(std::move(out));
        nodes.push_back({OpKind::Conv, a, -1, int(vol.size()) - 1, pw, pb, stride});
        return int(vol.size()) - 1;
    }

    int relu(int a) {
        VolumeT<T> out = vol[size_t(a)];
        for (T& x : out.data) x = x > T(0) ? x : T(0);
        out.grad.assign(out.size(), T(0));
        vol.push_back(std::move(out));
        nodes.push_back({OpKind::Relu, a, -1, int(vol.size()) - 1, -1, -1, 1});
        return int(vol.size()) - 1;
    }

    int sigmoid(int a) {
        VolumeT<T> out = vol[size_t(a)];
        for (T& x : out.data) x = T(1) / (T(1) + std::exp(-x));
        out.grad.assign(out.size(), T(0));
        vol.push_back(std::move(out));
        nodes.push_back({OpKind::Sigmoid, a, -1, int(vol.size()) - 1, -1, -1, 1});
        return int(vol.size()) - 1;
    }

    int add(int a, int b) {
        const VolumeT<T>&va = vol[size_t(a)], &vb = vol[size_t(b)];
        require(va.C == vb.C && va.W == vb.W && va.L == vb.L && va.H == vb.H,
                "add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
        VolumeT<T> out = va;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
        out.grad.assign(out.size(), T(0));
        vol.push_back(std::move(out));
        nodes.push_back({OpKind::Add, a, b, int(vol.size()) - 1, -1, -1, 1});
        return int(vol.size()) - 1;
    }

    // exp over the first n_exp channels, identity on the rest; maps raw
    // regression outputs to strictly positive face distances
    int exp_prefix(int a, int n_exp) {
        VolumeT<T> out = vol[size_t(a)];
        require(n_exp >= 0 && n_exp <= out.C, "exp_prefix: channel count out of range");
        size_t spatial = size_t(out.W) * size_t(out.L) * size_t(out.H);
        for (size_t i = 0; i < size_t(n_exp) * spatial; ++i) out.data[i] = std::exp(out.data[i]);
        out.grad.assign(out.size(), T(0));
        vol.push_back(std::move(out));
        nodes.push_back({OpKind::ExpPrefix, a, n_exp, int(vol.size()) - 1, -1, -1, 1});
        return int(vol.size()) - 1;
    }

    // nearest doubling, cropped to the target; if the target overshoots 2x
    // the trailing slice is replicated and the event is logged
    int upsample_to(int a, int W, int L, int H) {
        const VolumeT<T>& src = vol[size_t(a)];
        require(W > 0 && L > 0 && H > 0, "upsample_to: empty target");
        if ((W > 2 * src.W || L > 2 * src.L || H > 2 * src.H) && notes)
            notes->push_back("upsample replicated edge slices: " + src.shape_str() + " -> [" +
                             std::to_string(src.C) + "," + std::to_string(W) + "," +
                             std::to_string(L) + "," + std::to_string(H) + "]");
        VolumeT<T> out(src.C, W, L, H);
        for (int c = 0; c < src.C; ++c)
            for (int k = 0; k < H; ++k) {
                int sk = std::min(k / 2, src.H - 1);
                for (int j = 0; j < L; ++j) {
                    int sj = std::min(j / 2, src.L - 1);
                    for (int i = 0; i < W; ++i)
                        out.at(c, i, j, k) = src.at(c, std::min(i / 2, src.W - 1), sj, sk);
                }
            }
        out.grad.assign(out.size(), T(0));
        vol.push_back(std::move(out));
        nodes.push_back({OpKind::Upsample, a, -1, int(vol.size()) - 1, -1, -1, 1});
        return int(vol.size()) - 1;
    }

    // reverse sweep; output gradients must be seeded by the caller
    void backward() {
        for (size_t ni = nodes.size(); ni-- > 0;) {
            const Node& n = nodes[ni];
            if (n.kind == OpKind::Input) continue;
            VolumeT<T>& out = vol[size_t(n.out)];
            VolumeT<T>& a = vol[size_t(n.a)];
            switch (n.kind) {
                case OpKind::Conv:
                    conv3d_backward(a, (*tensors)[size_t(n.pw)], (*tensors)[size_t(n.pb)],
                                    n.stride, out);
                    break;
                case OpKind::Relu:
                    for (size_t i = 0; i < a.data.size(); ++i)
                        if (a.data[i] > T(0)) a.grad[i] += out.grad[i];
                    break;
                case OpKind::Sigmoid:
                    for (size_t i = 0; i < a.data.size(); ++i) {
                        T s = out.data[i];
                        a.grad[i] += s * (T(1) - s) * out.grad[i];
                    }
                    break;
                case OpKind::Add: {
                    VolumeT<T>& b = vol[size_t(n.b)];
                    for (size_t i = 0; i < a.data.size(); ++i) {
                        a.grad[i] += out.grad[i];
                        b.grad[i] += out.grad[i];
                    }
                    break;
                }
                case OpKind::ExpPrefix: {
                    size_t spatial = size_t(a.W) * size_t(a.L) * size_t(a.H);
                    size_t cut = size_t(n.b) * spatial;  // b holds the channel count here
                    for (size_t i = 0; i < cut; ++i) a.grad[i] += out.data[i] * out.grad[i];
                    for (size_t i = cut; i < a.data.size(); ++i) a.grad[i] += out.grad[i];
                    break;
                }
                case OpKind::Upsample:
                    for (int c = 0; c < a.C; ++c)
                        for (int k = 0; k < out.H; ++k) {
                            int sk = std::min(k / 2, a.H - 1);
                            for (int j = 0; j < out.L; ++j) {
                                int sj = std::min(j / 2, a.L - 1);
                                for (int i = 0; i < out.W; ++i)
                                    a.grad[a.idx(c, std::min(i / 2, a.W - 1), sj, sk)] +=
                                        out.grad[out.idx(c, i, j, k)];
                            }
                        }
                    break;
                default:
                    break;
            }
        }
    }
};

enum class HeadKind { Anchor, Fcos };

inline std::string head_kind_name(HeadKind h) { return h == HeadKind::Anchor ? "anchor" : "fcos"; }
inline HeadKind head_kind_from(const std::string& s) {
    if (s == "anchor") return HeadKind::Anchor;
    if (s == "fcos") return HeadKind::Fcos;
    throw std::invalid_argument("unknown head kind: " + s);
}

// micro backbone + pyramid + head family; small knobs, fixed wiring
struct NetConfig {
    int in_channels = 1;
    std::vector<int> stage_channels = {8, 16, 32};
    std::vector<int> stage_strides = {1, 2, 2};
    std::vector<int> fpn_stages = {1, 2};
    int fpn_channels = 16;
    int head_convs = 2;
    int anchors_per_voxel = 13;
    HeadKind head = HeadKind::Fcos;

    void validate() const {
        require(in_channels >= 1, "net: in_channels >= 1");
        require(!stage_channels.empty() && stage_channels.size() == stage_strides.size(),
                "net: one stride per stage");
        for (int c : stage_channels) require(c >= 1, "net: stage channels >= 1");
        for (int s : stage_strides) require(s == 1 || s == 2, "net: stage stride must be 1 or 2");
        require(!fpn_stages.empty(), "net: at least one pyramid tap");
        int prev_stage = -1, prev_stride = 0;
        for (int t : fpn_stages) {
            require(t > prev_stage && t < int(stage_channels.size()),
                    "net: pyramid taps must be increasing stage indices");
            int acc = 1;
            for (int s = 0; s <= t; ++s) acc *= stage_strides[size_t(s)];
            require(acc > prev_stride, "net: pyramid tap strides must strictly increase");
            prev_stage = t;
            prev_stride = acc;
        }
        require(fpn_channels >= 1, "net: fpn_channels >= 1");
        require(head_convs >= 0, "net: head_convs >= 0");
        require(anchors_per_voxel >= 1, "net: anchors_per_voxel >= 1");
    }

    json to_json() const {
        return json{{"in_channels", in_channels},
                    {"stage_channels", stage_channels},
                    {"stage_strides", stage_strides},
                    {"fpn_stages", fpn_stages},
                    {"fpn_channels", fpn_channels},
                    {"head_convs", head_convs},
                    {"anchors_per_voxel", anchors_per_voxel},
                    {"head", head_kind_name(head)}};
    }

    static NetConfig from_json(const json& j) {
        NetConfig c;
        c.in_channels = j.at("in_channels").get<int>();
        c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
        c.stage_strides = j.at("stage_strides").get<std::vector<int>>();
        c.fpn_stages = j.at("fpn_stages").get<std::vector<int>>();
        c.fpn_channels = j.at("fpn_channels").get<int>();
        c.head_convs = j.at("head_convs").get<int>();
        c.anchors_per_voxel = j.at("anchors_per_voxel").get<int>();
        c.head = head_kind_from(j.at("head").get<std::string>());
        c.validate();
        return c;
    }
};

// one forward pass: the tape plus ids of the volumes later stages care about
template <class T>
struct ForwardT {
    TapeT<T> tape;
    std::vector<LevelLayout> levels;
    std::vector<int> fpn;  // pyramid feature volume per level
    std::vector<int> obj;  // probabilities (sigmoid applied)
    std::vector<int> reg;  // raw regression channels
    std::vector<int> ctr;  // centerness probabilities, per-voxel head only
};

template <class T>
class NetT {
  public:
    NetConfig cfg;
    std::vector<TensorT<T>> params;
    uint64_t seed = 0;
    int64_t step = 0;
    std::vector<std::string> notes;

    static NetT make(const NetConfig& cfg, uint64_t seed) {
        cfg.validate();
        NetT net;
        net.cfg = cfg;
        net.seed = seed;
        Rng rng(seed);
        int cin = cfg.in_channels;
        for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
            net.add_conv("backbone." + std::to_string(s), cin, cfg.stage_channels[s], 3, rng);
            cin = cfg.stage_channels[s];
        }
        for (size_t i = 0; i < cfg.fpn_stages.size(); ++i)
            net.add_conv("fpn.lateral." + std::to_string(i),
                         cfg.stage_channels[size_t(cfg.fpn_stages[i])], cfg.fpn_channels, 1, rng);
        for (size_t i = 0; i < cfg.fpn_stages.size(); ++i)
            net.add_conv("fpn.out." + std::to_string(i), cfg.fpn_channels, cfg.fpn_channels, 3,
                         rng);
        int fc = cfg.fpn_channels;
        if (cfg.head == HeadKind::Anchor) {
            for (int j = 0; j < cfg.head_convs; ++j)
                net.add_conv("head.shared." + std::to_string(j), fc, fc, 3, rng);
            net.add_conv("head.obj", fc, cfg.anchors_per_voxel, 1, rng);
            net.add_conv("head.delta", fc, 8 * cfg.anchors_per_voxel, 1, rng);
        } else {
            for (int j = 0; j < cfg.head_convs; ++j)
                net.add_conv("head.cls." + std::to_string(j), fc, fc, 3, rng);
            for (int j = 0; j < cfg.head_convs; ++j)
                net.add_conv("head.reg." + std::to_string(j), fc, fc, 3, rng);
            // start the classifier near "background" so focal loss is calm
            net.add_conv("head.cls_out", fc, 1, 1, rng, -2.0);
            net.add_conv("head.reg_out", fc, 8, 1, rng);
            net.add_conv("head.ctr_out", fc, 1, 1, rng);
        }
        return net;
    }

    TensorT<T>& tensor(const std::string& name) {
        auto it = index_.find(name);
        require(it != index_.end(), "net: no tensor named " + name);
        return params[it->second];
    }
    const TensorT<T>& tensor(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "net: no tensor named " + name);
        return params[it->second];
    }

    size_t param_count() const {
        size_t n = 0;
        for (const TensorT<T>& t : params) n += t.size();
        return n;
    }

    ForwardT<T> forward(const VolumeT<T>& input) {
        require(input.C == cfg.in_channels,
                "net: input has " + std::to_string(input.C) + " channels, expected " +
                    std::to_string(cfg.in_channels));
        ForwardT<T> f;
        f.tape.tensors = &params;
        f.tape.notes = &notes;
        int x = f.tape.input(input);
        std::vector<int> taps, tap_strides;
        int acc = 1;
        for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
            x = f.tape.conv(x, id("backbone." + std::to_string(s) + ".w"),
                            id("backbone." + std::to_string(s) + ".b"), cfg.stage_strides[s]);
            x = f.tape.relu(x);
            acc *= cfg.stage_strides[s];
            taps.push_back(x);
            tap_strides.push_back(acc);
        }
        size_t nf = cfg.fpn_stages.size();
        std::vector<int> lateral(nf), merged(nf);
        for (size_t i = 0; i < nf; ++i)
            lateral[i] = f.tape.conv(taps[size_t(cfg.fpn_stages[i])],
                                     id("fpn.lateral." + std::to_string(i) + ".w"),
                                     id("fpn.lateral." + std::to_string(i) + ".b"), 1);
        merged[nf - 1] = lateral[nf - 1];
        for (size_t i = nf - 1; i-- > 0;) {
            const VolumeT<T>& want = f.tape.vol[size_t(lateral[i])];
            int up = f.tape.upsample_to(merged[i + 1], want.W, want.L, want.H);
            merged[i] = f.tape.add(lateral[i], up);
        }
        for (size_t i = 0; i < nf; ++i) {
            f.fpn.push_back(f.tape.conv(merged[i], id("fpn.out." + std::to_string(i) + ".w"),
                                        id("fpn.out." + std::to_string(i) + ".b"), 1));
            const VolumeT<T>& v = f.tape.vol[size_t(f.fpn.back())];
            f.levels.push_back({tap_strides[size_t(cfg.fpn_stages[i])], v.W, v.L, v.H});
        }
        for (size_t i = 0; i < nf; ++i) {
            if (cfg.head == HeadKind::Anchor) {
                int h = f.fpn[i];
                for (int j = 0; j < cfg.head_convs; ++j)
                    h = f.tape.relu(f.tape.conv(h, id("head.shared." + std::to_string(j) + ".w"),
                                                id("head.shared." + std::to_string(j) + ".b"), 1));
                f.obj.push_back(
                    f.tape.sigmoid(f.tape.conv(h, id("head.obj.w"), id("head.obj.b"), 1)));
                f.reg.push_back(f.tape.conv(h, id("head.delta.w"), id("head.delta.b"), 1));
            } else {
                int hc = f.fpn[i], hr = f.fpn[i];
                for (int j = 0; j < cfg.head_convs; ++j)
                    hc = f.tape.relu(f.tape.conv(hc, id("head.cls." + std::to_string(j) + ".w"),
                                                 id("head.cls." + std::to_string(j) + ".b"), 1));
                for (int j = 0; j < cfg.head_convs; ++j)
                    hr = f.tape.relu(f.tape.conv(hr, id("head.reg." + std::to_string(j) + ".w"),
                                                 id("head.reg." + std::to_string(j) + ".b"), 1));
                f.obj.push_back(
                    f.tape.sigmoid(f.tape.conv(hc, id("head.cls_out.w"), id("head.cls_out.b"), 1)));
                // face distances come out of an exp so they are positive from
                // the first step; the two vertex offsets stay raw
                f.reg.push_back(f.tape.exp_prefix(
                    f.tape.conv(hr, id("head.reg_out.w"), id("head.reg_out.b"), 1), 6));
                f.ctr.push_back(
                    f.tape.sigmoid(f.tape.conv(hr, id("head.ctr_out.w"), id("head.ctr_out.b"), 1)));
            }
        }
        return f;
    }

    // reverse sweep into parameter gradients; output grads seeded by caller
    void backward(ForwardT<T>& f) {
        f.tape.backward();
        grads_ready_ = true;
    }

    void zero_grad() {
        for (TensorT<T>& t : params) std::fill(t.g.begin(), t.g.end(), T(0));
    }

    void adamw_step(double lr = 3e-4, double wd = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8) {
        if (!grads_ready_)
            throw std::runtime_error("optimizer step before any backward pass");
        ++step;
        for (TensorT<T>& t : params) adamw_update(t, step, lr, wd, beta1, beta2, eps);
        grads_ready_ = false;
        zero_grad();
    }

    bool grads_ready() const { return grads_ready_; }
    void mark_grads_ready() { grads_ready_ = true; }  // for checkpoint restore paths

  private:
    std::map<std::string, size_t> index_;
    bool grads_ready_ = false;

    int id(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "net: no tensor named " + name);
        return int(it->second);
    }

    void add_conv(const std::string& name, int cin, int cout, int k, Rng& rng, double bias = 0.0) {
        TensorT<T> w;
        w.name = name + ".w";
        w.shape = {cout, cin, k, k, k};
        w.alloc(size_t(cout) * cin * k * k * k);
        double limit = std::sqrt(6.0 / (double(cin) * k * k * k));
        for (T& x : w.w) x = T(rng.uniform(-limit, limit));
        TensorT<T> b;
        b.name = name + ".b";
        b.shape = {cout};
        b.alloc(size_t(cout));
        std::fill(b.w.begin(), b.w.end(), T(bias));
        index_[w.name] = params.size();
        params.push_back(std::move(w));
        index_[b.name] = params.size();
        params.push_back(std::move(b));
    }
};

// ---- bridging head volumes to the flat per-anchor / per-voxel layout ----
//
// Global anchor index within a level is a*W*L*H + flat(i,j,k); the objectness
// volume stores anchor a in channel a and the delta volume stores component d
// of anchor a in channel a*8 + d, so flattening is a straight copy.

struct FlatAnchorOut {
    std::vector<double> p;
    std::vector<std::array<double, 8>> t;
};

template <class T>
FlatAnchorOut flatten_anchor_outputs(const ForwardT<T>& f) {
    FlatAnchorOut out;
    for (size_t li = 0; li < f.levels.size(); ++li) {
        const VolumeT<T>& vp = f.tape.vol[size_t(f.obj[li])];
        const VolumeT<T>& vt = f.tape.vol[size_t(f.reg[li])];
        int A = vp.C;
        size_t sp = vp.spatial();
        size_t base = out.p.size();
        out.p.resize(base + size_t(A) * sp);
        out.t.resize(base + size_t(A) * sp);
        for (size_t i = 0; i < size_t(A) * sp; ++i) out.p[base + i] = double(vp.data[i]);
        for (int a = 0; a < A; ++a)
            for (int d = 0; d < 8; ++d) {
                const T* src = vt.data.data() + (size_t(a) * 8 + d) * sp;
                for (size_t i = 0; i < sp; ++i) out.t[base + size_t(a) * sp + i][size_t(d)] =
                    double(src[i]);
            }
    }
    return out;
}

template <class T>
void scatter_anchor_grads(ForwardT<T>& f, const std::vector<double>& dp,
                          const std::vector<std::array<double, 8>>& dt) {
    size_t base = 0;
    for (size_t li = 0; li < f.levels.size(); ++li) {
        VolumeT<T>& vp = f.tape.vol[size_t(f.obj[li])];
        VolumeT<T>& vt = f.tape.vol[size_t(f.reg[li])];
        int A = vp.C;
        size_t sp = vp.spatial();
        for (size_t i = 0; i < size_t(A) * sp; ++i) vp.grad[i] = T(dp[base + i]);
        for (int a = 0; a < A; ++a)
            for (int d = 0; d < 8; ++d) {
                T* dst = vt.grad.data() + (size_t(a) * 8 + d) * sp;
                for (size_t i = 0; i < sp; ++i) dst[i] = T(dt[base + size_t(a) * sp + i][size_t(d)]);
            }
        base += size_t(A) * sp;
    }
    require(base == dp.size() && base == dt.size(), "scatter_anchor_grads: size mismatch");
}

struct FlatFcosOut {
    std::vector<double> p, c;
    std::vector<std::array<double, 8>> t;
};

template <class T>
FlatFcosOut flatten_fcos_outputs(const ForwardT<T>& f) {
    FlatFcosOut out;
    for (size_t li = 0; li < f.levels.size(); ++li) {
        const VolumeT<T>& vp = f.tape.vol[size_t(f.obj[li])];
        const VolumeT<T>& vt = f.tape.vol[size_t(f.reg[li])];
        const VolumeT<T>& vc = f.tape.vol[size_t(f.ctr[li])];
        size_t sp = vp.spatial();
        size_t base = out.p.size();
        out.p.resize(base + sp);
        out.c.resize(base + sp);
        out.t.resize(base + sp);
        for (size_t i = 0; i < sp; ++i) {
            out.p[base + i] = double(vp.data[i]);
            out.c[base + i] = double(vc.data[i]);
            for (int d = 0; d < 8; ++d) out.t[base + i][size_t(d)] = double(vt.data[size_t(d) * sp + i]);
        }
    }
    return out;
}

template <class T>
void scatter_fcos_grads(ForwardT<T>& f, const std::vector<double>& dp,
                        const std::vector<double>& dc,
                        const std::vector<std::array<double, 8>>& dt) {
    size_t base = 0;
    for (size_t li = 0; li < f.levels.size(); ++li) {
        VolumeT<T>& vp = f.tape.vol[size_t(f.obj[li])];
        VolumeT<T>& vt = f.tape.vol[size_t(f.reg[li])];
        VolumeT<T>& vc = f.tape.vol[size_t(f.ctr[li])];
        size_t sp = vp.spatial();
        for (size_t i = 0; i < sp; ++i) {
            vp.grad[i] = T(dp[base + i]);
            vc.grad[i] = T(dc[base + i]);
            for (int d = 0; d < 8; ++d) vt.grad[size_t(d) * sp + i] = T(dt[base + i][size_t(d)]);
        }
        base += sp;
    }
    require(base == dp.size() && base == dc.size() && base == dt.size(),
            "scatter_fcos_grads: size mismatch");
}

// ---- checkpoint format ----
//
// "NCK1" magic, u64 little-endian manifest length, JSON manifest, then one
// little-endian f32 blob holding weights and both optimizer moments per
// tensor. Offsets are in floats from the blob start.

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

template <class T>
void save_checkpoint(const NetT<T>& net, const std::string& path) {
    json tensors = json::array();
    size_t off = 0;
    for (const TensorT<T>& t : net.params) {
        size_t n = t.size();
        tensors.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"offset", off},
                           {"m_offset", off + n},
                           {"v_offset", off + 2 * n}});
        off += 3 * n;
    }
    json manifest = {{"format", "NCK1"},       {"netspec", net.cfg.to_json()},
                     {"seed", net.seed},       {"step", net.step},
                     {"tensors", tensors},     {"blob_floats", off}};
    std::string ms = manifest.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "checkpoint: cannot open " + path + " for writing");
    out.write("NCK1", 4);
    uint64_t len = ms.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(ms.data(), std::streamsize(ms.size()));
    std::vector<float> buf;
    auto dump = [&](const std::vector<T>& v) {
        buf.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) buf[i] = float(v[i]);
        out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(4 * buf.size()));
    };
    for (const TensorT<T>& t : net.params) {
        dump(t.w);
        dump(t.m);
        dump(t.v);
    }
    require(out.good(), "checkpoint: write failed for " + path);
}

template <class T>
NetT<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in.good() || std::string(magic, 4) != "NCK1")
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    require(in.good() && len > 0 && len < (1ull << 32), "checkpoint: bad manifest length");
    std::string ms(len, '\0');
    in.read(ms.data(), std::streamsize(len));
    require(in.good(), "checkpoint: truncated manifest");
    json manifest;
    try {
        manifest = json::parse(ms);
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint: manifest parse failed: " + std::string(e.what()));
    }
    require(manifest.at("format").get<std::string>() == "NCK1", "checkpoint: unknown format tag");
    NetConfig cfg = NetConfig::from_json(manifest.at("netspec"));
    NetT<T> net = NetT<T>::make(cfg, manifest.at("seed").get<uint64_t>());
    net.step = manifest.at("step").get<int64_t>();
    size_t floats = manifest.at("blob_floats").get<size_t>();
    std::vector<float> blob(floats);
    in.read(reinterpret_cast<char*>(blob.data()), std::streamsize(4 * floats));
    require(in.good(), "checkpoint: truncated blob");
    size_t seen = 0;
    for (const json& tj : manifest.at("tensors")) {
        TensorT<T>& t = net.tensor(tj.at("name").get<std::string>());
        require(tj.at("shape").get<std::vector<int>>() == t.shape,
                "checkpoint: shape mismatch for " + t.name);
        size_t n = t.size(), o = tj.at("offset").get<size_t>(), mo = tj.at("m_offset").get<size_t>(),
               vo = tj.at("v_offset").get<size_t>();
        require(o + n <= floats && mo + n <= floats && vo + n <= floats,
                "checkpoint: tensor offsets out of range");
        for (size_t i = 0; i < n; ++i) {
            require(std::isfinite(blob[o + i]), "checkpoint: non-finite weight in " + t.name);
            t.w[i] = T(blob[o + i]);
            t.m[i] = T(blob[mo + i]);
            t.v[i] = T(blob[vo + i]);
        }
        ++seen;
    }
    require(seen == net.params.size(), "checkpoint: tensor table incomplete");
    return net;
}

}  // namespace voxrpn
