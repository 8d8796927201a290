#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "patchdet/errors.hpp"
#include "patchdet/image.hpp"
#include "patchdet/parallel.hpp"
#include "patchdet/rng.hpp"

namespace patchdet {

struct BackboneSpec {
  std::string kind = "builtin_small_cnn";
  int input_size = 64;   // square patch side; also the thumbnail size for warm-start
  int in_channels = 1;
  bool pretrained = false;
};

// Patch scorer contract: maps a patch to a disease confidence strictly inside
// (0,1). Evaluation scoring is a pure function of (parameters, patch); one
// train_batch call performs one optimizer step.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual const BackboneSpec& spec() const = 0;
  virtual std::size_t parameter_count() const = 0;
  virtual std::uint64_t step_count() const = 0;
  virtual void init(std::uint64_t seed) = 0;
  virtual void score(const Image* const* patches, std::size_t n, float* out) const = 0;
  virtual double train_batch(const Image* const* patches, const std::uint8_t* labels,
                             const float* weights, std::size_t n, float lr, float momentum) = 0;
  virtual void save(std::ostream& out) const = 0;
  virtual void load(std::istream& in) = 0;
  virtual std::unique_ptr<Backbone> clone() const = 0;
};

namespace nn {

inline void relu(float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > 0.f ? x[i] : 0.f;
}

// 3x3 convolution, stride 1, zero padding 1. Weights laid out [co][ci][ky][kx].
inline void conv3x3(const float* in, int cin, int h, int w, const float* wts, const float* bias,
                    int cout, float* out) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int co = 0; co < cout; ++co) {
    float* o = out + co * plane;
    const float bv = bias[co];
    for (std::size_t i = 0; i < plane; ++i) o[i] = bv;
    for (int ci = 0; ci < cin; ++ci) {
      const float* a = in + ci * plane;
      const float* k = wts + (static_cast<std::size_t>(co) * cin + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const float wv = k[ky * 3 + kx];
          const int dy = ky - 1, dx = kx - 1;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int y = y0; y < y1; ++y) {
            float* orow = o + static_cast<std::size_t>(y) * w;
            const float* arow = a + static_cast<std::size_t>(y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wv * arow[x];
          }
        }
      }
    }
  }
}

// Gradients for conv3x3: accumulates into dwts/dbias; writes din unless null.
inline void conv3x3_backward(const float* in, const float* dout, int cin, int h, int w, int cout,
                             const float* wts, float* dwts, float* dbias, float* din) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  if (din) std::memset(din, 0, sizeof(float) * cin * plane);
  for (int co = 0; co < cout; ++co) {
    const float* do_ = dout + co * plane;
    float acc = 0.f;
    for (std::size_t i = 0; i < plane; ++i) acc += do_[i];
    dbias[co] += acc;
    for (int ci = 0; ci < cin; ++ci) {
      const float* a = in + ci * plane;
      float* di = din ? din + ci * plane : nullptr;
      const float* k = wts + (static_cast<std::size_t>(co) * cin + ci) * 9;
      float* dk = dwts + (static_cast<std::size_t>(co) * cin + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int dy = ky - 1, dx = kx - 1;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          float wgrad = 0.f;
          const float wv = k[ky * 3 + kx];
          for (int y = y0; y < y1; ++y) {
            const float* drow = do_ + static_cast<std::size_t>(y) * w;
            const float* arow = a + static_cast<std::size_t>(y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) wgrad += drow[x] * arow[x];
            if (di) {
              float* dirow = di + static_cast<std::size_t>(y + dy) * w + dx;
              for (int x = x0; x < x1; ++x) dirow[x] += wv * drow[x];
            }
          }
          dk[ky * 3 + kx] += wgrad;
        }
      }
    }
  }
}

// 2x2 max pooling, stride 2 (trailing odd row/col dropped); records the
// winning offset for backward routing.
inline void maxpool2(const float* in, int c, int h, int w, float* out, std::uint8_t* idx) {
  const int oh = h / 2, ow = w / 2;
  for (int ci = 0; ci < c; ++ci) {
    const float* a = in + static_cast<std::size_t>(ci) * h * w;
    float* o = out + static_cast<std::size_t>(ci) * oh * ow;
    std::uint8_t* ix = idx + static_cast<std::size_t>(ci) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const float* base = a + static_cast<std::size_t>(2 * y) * w + 2 * x;
        float best = base[0];
        std::uint8_t bi = 0;
        if (base[1] > best) { best = base[1]; bi = 1; }
        if (base[w] > best) { best = base[w]; bi = 2; }
        if (base[w + 1] > best) { best = base[w + 1]; bi = 3; }
        o[static_cast<std::size_t>(y) * ow + x] = best;
        ix[static_cast<std::size_t>(y) * ow + x] = bi;
      }
    }
  }
}

inline void maxpool2_backward(const float* dout, const std::uint8_t* idx, int c, int h, int w,
                              float* din) {
  const int oh = h / 2, ow = w / 2;
  std::memset(din, 0, sizeof(float) * c * h * w);
  for (int ci = 0; ci < c; ++ci) {
    const float* d = dout + static_cast<std::size_t>(ci) * oh * ow;
    const std::uint8_t* ix = idx + static_cast<std::size_t>(ci) * oh * ow;
    float* di = din + static_cast<std::size_t>(ci) * h * w;
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const std::uint8_t bi = ix[static_cast<std::size_t>(y) * ow + x];
        const int yy = 2 * y + (bi >> 1), xx = 2 * x + (bi & 1);
        di[static_cast<std::size_t>(yy) * w + xx] += d[static_cast<std::size_t>(y) * ow + x];
      }
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Built-in backbone: 4 conv blocks (3x3 conv + ReLU + 2x2 maxpool), global
// average pooling and a two-logit head; the disease probability is the
// softmax mass of logit 1. Accepts any square input with side >= 16.
class BuiltinSmallCnn final : public Backbone {
 public:
  static constexpr int kChannels[4] = {8, 16, 32, 48};

  explicit BuiltinSmallCnn(const BackboneSpec& spec) : spec_(spec) {
    if (spec_.input_size < 16)
      throw ConfigError("builtin_small_cnn requires input_size >= 16, got " +
                        std::to_string(spec_.input_size));
    if (spec_.in_channels != 1 && spec_.in_channels != 3)
      throw ConfigError("builtin_small_cnn supports 1 or 3 input channels");
    compute_dims();
    params_.assign(total_params_, 0.f);
    velocity_.assign(total_params_, 0.f);
    init(0);
  }

  const BackboneSpec& spec() const override { return spec_; }
  std::size_t parameter_count() const override { return total_params_; }
  std::uint64_t step_count() const override { return step_; }

  void init(std::uint64_t seed) override {
    Rng rng(Rng::mix(seed, 0x5EED));
    int cin = spec_.in_channels;
    for (int l = 0; l < 4; ++l) {
      const int cout = kChannels[l];
      const double std = std::sqrt(2.0 / (cin * 9));
      float* w = params_.data() + off_w_[l];
      for (int i = 0; i < cout * cin * 9; ++i) w[i] = static_cast<float>(rng.gaussian() * std);
      std::memset(params_.data() + off_b_[l], 0, sizeof(float) * cout);
      cin = cout;
    }
    float* fw = params_.data() + off_fcw_;
    for (int i = 0; i < 2 * kChannels[3]; ++i)
      fw[i] = static_cast<float>(rng.gaussian() * 0.01);  // near-0.5 initial scores
    params_[off_fcb_] = params_[off_fcb_ + 1] = 0.f;
    std::fill(velocity_.begin(), velocity_.end(), 0.f);
    step_ = 0;
  }

  void score(const Image* const* patches, std::size_t n, float* out) const override {
    parallel_chunks(n, [&](std::size_t, std::size_t b, std::size_t e) {
      Workspace ws(*this);
      for (std::size_t i = b; i < e; ++i) {
        validate_input(*patches[i]);
        to_input(*patches[i], ws.in.data());
        const auto [p, z0, z1] = forward(ws);
        (void)z0; (void)z1;
        out[i] = std::clamp(p, 1e-7f, 1.f - 1e-7f);
      }
    });
  }

  double train_batch(const Image* const* patches, const std::uint8_t* labels,
                     const float* weights, std::size_t n, float lr, float momentum) override {
    if (n == 0) throw TrainError("train_batch: empty batch");
    // Per-sample gradient buffers keep the reduction order fixed regardless
    // of the worker count, so training histories are reproducible.
    std::vector<std::vector<float>> grads(n);
    std::vector<double> losses(n, 0.0);
    parallel_chunks(n, [&](std::size_t, std::size_t b, std::size_t e) {
      Workspace ws(*this);
      for (std::size_t i = b; i < e; ++i) {
        validate_input(*patches[i]);
        grads[i].assign(total_params_, 0.f);
        to_input(*patches[i], ws.in.data());
        const auto [p, lz0, lz1] = forward(ws);
        (void)p;
        const int label = labels[i] ? 1 : 0;
        const float w = weights[i];
        losses[i] = -static_cast<double>(w) * (label ? lz1 : lz0);
        const float inv_n = 1.f / static_cast<float>(n);
        float dz[2];
        dz[0] = w * inv_n * (std::exp(lz0) - (label == 0 ? 1.f : 0.f));
        dz[1] = w * inv_n * (std::exp(lz1) - (label == 1 ? 1.f : 0.f));
        backward(ws, dz, grads[i].data());
      }
    });
    double loss = 0.0;
    for (const double l : losses) loss += l;
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss))
      throw TrainError("train_batch: non-finite loss at step " + std::to_string(step_));
    for (auto& v : velocity_) v *= momentum;
    for (std::size_t i = 0; i < n; ++i) {
      const float* g = grads[i].data();
      for (std::size_t k = 0; k < total_params_; ++k) velocity_[k] += g[k];
    }
    for (std::size_t k = 0; k < total_params_; ++k) params_[k] -= lr * velocity_[k];
    ++step_;
    return loss;
  }

  void save(std::ostream& out) const override {
    const char magic[8] = {'P', 'D', 'C', 'K', 'P', 'T', '0', '1'};
    out.write(magic, 8);
    write_u32(out, static_cast<std::uint32_t>(spec_.kind.size()));
    out.write(spec_.kind.data(), static_cast<std::streamsize>(spec_.kind.size()));
    write_u32(out, static_cast<std::uint32_t>(spec_.input_size));
    write_u32(out, static_cast<std::uint32_t>(spec_.in_channels));
    write_u64(out, step_);
    write_u64(out, total_params_);
    out.write(reinterpret_cast<const char*>(params_.data()),
              static_cast<std::streamsize>(sizeof(float) * total_params_));
    write_u64(out, param_checksum());
    if (!out) throw DataError("checkpoint write failed");
  }

  void load(std::istream& in) override {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "PDCKPT01", 8) != 0)
      throw DataError("checkpoint: bad magic (corrupt or not a checkpoint)");
    const std::uint32_t klen = read_u32(in);
    if (klen > 256) throw DataError("checkpoint: corrupt kind length");
    std::string kind(klen, '\0');
    in.read(kind.data(), klen);
    if (kind != spec_.kind) throw DataError("checkpoint: kind mismatch: " + kind);
    const std::uint32_t isize = read_u32(in);
    const std::uint32_t ich = read_u32(in);
    spec_.input_size = static_cast<int>(isize);
    spec_.in_channels = static_cast<int>(ich);
    compute_dims();
    step_ = read_u64(in);
    const std::uint64_t nparams = read_u64(in);
    if (nparams != total_params_)
      throw DataError("checkpoint: parameter count mismatch");
    params_.assign(total_params_, 0.f);
    in.read(reinterpret_cast<char*>(params_.data()),
            static_cast<std::streamsize>(sizeof(float) * total_params_));
    const std::uint64_t want = read_u64(in);
    if (!in || want != param_checksum())
      throw DataError("checkpoint: checksum mismatch (corrupt file)");
    velocity_.assign(total_params_, 0.f);  // optimizer state is not persisted
  }

  std::unique_ptr<Backbone> clone() const override {
    return std::make_unique<BuiltinSmallCnn>(*this);
  }

  // Direct parameter access (research-code convenience; used by gradient
  // checks and by adapters that warm-start from external weights).
  std::vector<float>& parameters() { return params_; }
  const std::vector<float>& parameters() const { return params_; }

 private:
  struct Dims {
    int s[5];  // spatial side before each block / after last pool
    std::size_t act[4];   // conv output sizes per block
    std::size_t pool[4];  // pooled sizes per block
  };

  struct Workspace {
    std::vector<float> in;
    std::vector<float> a[4], p[4];
    std::vector<std::uint8_t> idx[4];
    std::vector<float> g;      // GAP output
    std::vector<float> da[4], dp[4];
    std::vector<float> dg;

    explicit Workspace(const BuiltinSmallCnn& net) {
      in.resize(static_cast<std::size_t>(net.spec_.in_channels) * net.dims_.s[0] * net.dims_.s[0]);
      for (int l = 0; l < 4; ++l) {
        a[l].resize(net.dims_.act[l]);
        p[l].resize(net.dims_.pool[l]);
        idx[l].resize(net.dims_.pool[l]);
        da[l].resize(net.dims_.act[l]);
        dp[l].resize(net.dims_.pool[l]);
      }
      g.resize(kChannels[3]);
      dg.resize(kChannels[3]);
    }
  };

  void compute_dims() {
    dims_.s[0] = spec_.input_size;
    for (int l = 0; l < 4; ++l) {
      dims_.act[l] = static_cast<std::size_t>(kChannels[l]) * dims_.s[l] * dims_.s[l];
      dims_.s[l + 1] = dims_.s[l] / 2;
      dims_.pool[l] = static_cast<std::size_t>(kChannels[l]) * dims_.s[l + 1] * dims_.s[l + 1];
    }
    std::size_t off = 0;
    int cin = spec_.in_channels;
    for (int l = 0; l < 4; ++l) {
      off_w_[l] = off;
      off += static_cast<std::size_t>(kChannels[l]) * cin * 9;
      off_b_[l] = off;
      off += kChannels[l];
      cin = kChannels[l];
    }
    off_fcw_ = off;
    off += 2 * kChannels[3];
    off_fcb_ = off;
    off += 2;
    total_params_ = off;
  }

  void validate_input(const Image& patch) const {
    if (patch.width != spec_.input_size || patch.height != spec_.input_size)
      throw DataError("patch " + std::to_string(patch.width) + "x" + std::to_string(patch.height) +
                      " does not match backbone input size " + std::to_string(spec_.input_size));
  }

  void to_input(const Image& patch, float* out) const {
    const int s = spec_.input_size;
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    if (spec_.in_channels == 1) {
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          out[static_cast<std::size_t>(y) * s + x] = normalize(patch.luminance(x, y));
    } else {
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x)
            out[c * plane + static_cast<std::size_t>(y) * s + x] =
                normalize(patch.channels == 3 ? patch.at(x, y, c) : patch.at(x, y));
    }
  }

  static float normalize(std::uint8_t v) { return (v / 255.f - 0.5f) * 2.f; }

  // Returns (disease probability, log p0, log p1); activations stay in ws.
  std::tuple<float, float, float> forward(Workspace& ws) const {
    const float* in = ws.in.data();
    int cin = spec_.in_channels;
    for (int l = 0; l < 4; ++l) {
      const int side = dims_.s[l];
      nn::conv3x3(in, cin, side, side, params_.data() + off_w_[l], params_.data() + off_b_[l],
                  kChannels[l], ws.a[l].data());
      nn::relu(ws.a[l].data(), ws.a[l].size());
      nn::maxpool2(ws.a[l].data(), kChannels[l], side, side, ws.p[l].data(), ws.idx[l].data());
      in = ws.p[l].data();
      cin = kChannels[l];
    }
    const int f = dims_.s[4];
    const float inv_area = 1.f / static_cast<float>(f * f);
    for (int c = 0; c < kChannels[3]; ++c) {
      const float* plane = ws.p[3].data() + static_cast<std::size_t>(c) * f * f;
      float acc = 0.f;
      for (int i = 0; i < f * f; ++i) acc += plane[i];
      ws.g[c] = acc * inv_area;
    }
    const float* fw = params_.data() + off_fcw_;
    float z0 = params_[off_fcb_], z1 = params_[off_fcb_ + 1];
    for (int c = 0; c < kChannels[3]; ++c) {
      z0 += fw[c] * ws.g[c];
      z1 += fw[kChannels[3] + c] * ws.g[c];
    }
    const float zmax = std::max(z0, z1);
    const float lse = zmax + std::log(std::exp(z0 - zmax) + std::exp(z1 - zmax));
    return {std::exp(z1 - lse), z0 - lse, z1 - lse};
  }

  void backward(Workspace& ws, const float dz[2], float* grad) const {
    const int f = dims_.s[4];
    float* dfcw = grad + off_fcw_;
    float* dfcb = grad + off_fcb_;
    const float* fw = params_.data() + off_fcw_;
    dfcb[0] += dz[0];
    dfcb[1] += dz[1];
    for (int c = 0; c < kChannels[3]; ++c) {
      dfcw[c] += dz[0] * ws.g[c];
      dfcw[kChannels[3] + c] += dz[1] * ws.g[c];
      ws.dg[c] = dz[0] * fw[c] + dz[1] * fw[kChannels[3] + c];
    }
    const float inv_area = 1.f / static_cast<float>(f * f);
    for (int c = 0; c < kChannels[3]; ++c) {
      const float v = ws.dg[c] * inv_area;
      float* plane = ws.dp[3].data() + static_cast<std::size_t>(c) * f * f;
      for (int i = 0; i < f * f; ++i) plane[i] = v;
    }
    for (int l = 3; l >= 0; --l) {
      const int side = dims_.s[l];
      nn::maxpool2_backward(ws.dp[l].data(), ws.idx[l].data(), kChannels[l], side, side,
                            ws.da[l].data());
      // ReLU gate on the conv output
      for (std::size_t i = 0; i < ws.da[l].size(); ++i)
        if (ws.a[l][i] <= 0.f) ws.da[l][i] = 0.f;
      const float* in = l == 0 ? ws.in.data() : ws.p[l - 1].data();
      const int cin = l == 0 ? spec_.in_channels : kChannels[l - 1];
      float* din = l == 0 ? nullptr : ws.dp[l - 1].data();
      nn::conv3x3_backward(in, ws.da[l].data(), cin, side, side, kChannels[l],
                           params_.data() + off_w_[l], grad + off_w_[l], grad + off_b_[l], din);
    }
  }

  std::uint64_t param_checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(params_.data());
    for (std::size_t i = 0; i < sizeof(float) * total_params_; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
    return h;
  }

  static void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw DataError("checkpoint: truncated file");
    return v;
  }
  static std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw DataError("checkpoint: truncated file");
    return v;
  }

  BackboneSpec spec_;
  Dims dims_{};
  std::size_t off_w_[4]{}, off_b_[4]{}, off_fcw_ = 0, off_fcb_ = 0;
  std::size_t total_params_ = 0;
  std::vector<float> params_;
  std::vector<float> velocity_;
  std::uint64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Backbone registry: external adapters register a factory under their kind.
using BackboneFactory = std::function<std::unique_ptr<Backbone>(const BackboneSpec&)>;

inline std::map<std::string, BackboneFactory>& backbone_registry() {
  static std::map<std::string, BackboneFactory> registry = {
      {"builtin_small_cnn",
       [](const BackboneSpec& spec) { return std::make_unique<BuiltinSmallCnn>(spec); }},
  };
  return registry;
}

inline void register_backbone(const std::string& kind, BackboneFactory factory) {
  backbone_registry()[kind] = std::move(factory);
}

inline std::unique_ptr<Backbone> make_backbone(const BackboneSpec& spec) {
  auto& registry = backbone_registry();
  const auto it = registry.find(spec.kind);
  if (it == registry.end()) {
    std::string known;
    for (const auto& [k, _] : registry) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown backbone kind '" + spec.kind + "' (registered: " + known + ")");
  }
  return it->second(spec);
}

// ---------------------------------------------------------------------------
// Module-level operations
inline std::vector<float> score_patches(const Backbone& model, const std::vector<Image>& patches) {
  std::vector<float> out(patches.size());
  std::vector<const Image*> ptrs(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) ptrs[i] = &patches[i];
  model.score(ptrs.data(), ptrs.size(), out.data());
  return out;
}

inline double train_step(Backbone& model, const std::vector<const Image*>& patches,
                         const std::vector<std::uint8_t>& labels,
                         const std::vector<float>& weights, float lr, float momentum = 0.9f) {
  if (patches.empty() || patches.size() != labels.size() || patches.size() != weights.size())
    throw TrainError("train_step: batch arrays must be non-empty and of equal length");
  return model.train_batch(patches.data(), labels.data(), weights.data(), patches.size(), lr,
                           momentum);
}

inline void save_checkpoint(const Backbone& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("save_checkpoint: cannot open " + path);
  model.save(out);
}

inline std::unique_ptr<Backbone> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  // peek at the kind to construct via the registry
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "PDCKPT01", 8) != 0)
    throw DataError("load_checkpoint: not a checkpoint file: " + path);
  std::uint32_t klen = 0;
  in.read(reinterpret_cast<char*>(&klen), sizeof(klen));
  if (!in || klen > 256) throw DataError("load_checkpoint: corrupt header: " + path);
  std::string kind(klen, '\0');
  in.read(kind.data(), klen);
  if (!in) throw DataError("load_checkpoint: corrupt header: " + path);
  in.seekg(0);
  BackboneSpec spec;
  spec.kind = kind;
  auto model = make_backbone(spec);
  model->load(in);
  return model;
}

}  // namespace patchdet
