#include "umt/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "umt/common.hpp"

namespace umt {

namespace {

// Largest log size ratio accepted when decoding proposals (Faster R-CNN's
// log(1000/16)).
constexpr double kMaxLogRatio = 4.135166556742356;

double silu(double x) { return x * sigmoid(x); }

double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double smooth_l1_grad(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0 ? 1.0 : -1.0;
}

struct ConvShape {
  int in_c, in_h, in_w;
  int out_c, k, stride, pad;
  int out_h, out_w;

  static ConvShape make(int in_c, int in_h, int in_w, int out_c, int k, int stride, int pad) {
    const int oh = (in_h + 2 * pad - k) / stride + 1;
    const int ow = (in_w + 2 * pad - k) / stride + 1;
    return {in_c, in_h, in_w, out_c, k, stride, pad, oh, ow};
  }
  std::size_t in_size() const { return static_cast<std::size_t>(in_c) * in_h * in_w; }
  std::size_t out_size() const { return static_cast<std::size_t>(out_c) * out_h * out_w; }
};

// Valid output index range [lo, hi) for a kernel tap so the input index
// o*stride + tap - pad stays inside [0, n).
std::pair<int, int> tap_range(int tap, int pad, int stride, int n, int out_n) {
  int lo = 0;
  while (lo < out_n && lo * stride + tap - pad < 0) ++lo;
  int hi = out_n;
  while (hi > lo && (hi - 1) * stride + tap - pad >= n) --hi;
  return {lo, hi};
}

void conv_forward(const ConvShape& s, const double* in, const double* w, const double* b,
                  double* out) {
  const std::size_t plane = static_cast<std::size_t>(s.out_h) * s.out_w;
  for (int oc = 0; oc < s.out_c; ++oc) {
    double* o = out + oc * plane;
    std::fill(o, o + plane, b[oc]);
    for (int ic = 0; ic < s.in_c; ++ic) {
      const double* x = in + static_cast<std::size_t>(ic) * s.in_h * s.in_w;
      for (int ky = 0; ky < s.k; ++ky) {
        const auto [y0, y1] = tap_range(ky, s.pad, s.stride, s.in_h, s.out_h);
        for (int kx = 0; kx < s.k; ++kx) {
          const auto [x0, x1] = tap_range(kx, s.pad, s.stride, s.in_w, s.out_w);
          const double wv = w[((static_cast<std::size_t>(oc) * s.in_c + ic) * s.k + ky) * s.k + kx];
          for (int oy = y0; oy < y1; ++oy) {
            const double* row = x + static_cast<std::size_t>(oy * s.stride + ky - s.pad) * s.in_w;
            double* orow = o + static_cast<std::size_t>(oy) * s.out_w;
            for (int ox = x0; ox < x1; ++ox) orow[ox] += wv * row[ox * s.stride + kx - s.pad];
          }
        }
      }
    }
  }
}

void conv_backward(const ConvShape& s, const double* in, const double* w, const double* dout,
                   double* din, double* dw, double* db) {
  const std::size_t plane = static_cast<std::size_t>(s.out_h) * s.out_w;
  for (int oc = 0; oc < s.out_c; ++oc) {
    const double* g = dout + oc * plane;
    double bsum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) bsum += g[i];
    db[oc] += bsum;
    for (int ic = 0; ic < s.in_c; ++ic) {
      const std::size_t in_off = static_cast<std::size_t>(ic) * s.in_h * s.in_w;
      for (int ky = 0; ky < s.k; ++ky) {
        const auto [y0, y1] = tap_range(ky, s.pad, s.stride, s.in_h, s.out_h);
        for (int kx = 0; kx < s.k; ++kx) {
          const auto [x0, x1] = tap_range(kx, s.pad, s.stride, s.in_w, s.out_w);
          const std::size_t widx = ((static_cast<std::size_t>(oc) * s.in_c + ic) * s.k + ky) * s.k + kx;
          const double wv = w[widx];
          double acc = 0.0;
          for (int oy = y0; oy < y1; ++oy) {
            const std::size_t row = in_off + static_cast<std::size_t>(oy * s.stride + ky - s.pad) * s.in_w;
            const double* grow = g + static_cast<std::size_t>(oy) * s.out_w;
            for (int ox = x0; ox < x1; ++ox) {
              const std::size_t xi = row + ox * s.stride + kx - s.pad;
              acc += grow[ox] * in[xi];
              if (din) din[xi] += wv * grow[ox];
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
}

struct Backbone {
  ConvShape c1, c2, c3;
  std::vector<double> x, a1, h1, a2, h2, a3, h3;

  explicit Backbone(const ModelConfig& cfg)
      : c1(ConvShape::make(3, cfg.image_height, cfg.image_width, cfg.conv1_channels, 5, 2, 2)),
        c2(ConvShape::make(cfg.conv1_channels, c1.out_h, c1.out_w, cfg.conv2_channels, 3, 2, 1)),
        c3(ConvShape::make(cfg.conv2_channels, c2.out_h, c2.out_w, cfg.conv3_channels, 3, 1, 1)) {}

  void run(const DetectorParams& params, const Image& image) {
    const auto& L = params.layout();
    const double* p = params.values().data();
    const int H = image.height(), W = image.width();
    x.assign(c1.in_size(), 0.0);
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        for (int c = 0; c < 3; ++c)
          x[(static_cast<std::size_t>(c) * H + y) * W + xx] = 2.0 * image.at(y, xx, c) - 1.0;
    a1.assign(c1.out_size(), 0.0);
    conv_forward(c1, x.data(), p + L.conv1_w.offset, p + L.conv1_b.offset, a1.data());
    h1.resize(a1.size());
    std::transform(a1.begin(), a1.end(), h1.begin(), silu);
    a2.assign(c2.out_size(), 0.0);
    conv_forward(c2, h1.data(), p + L.conv2_w.offset, p + L.conv2_b.offset, a2.data());
    h2.resize(a2.size());
    std::transform(a2.begin(), a2.end(), h2.begin(), silu);
    a3.assign(c3.out_size(), 0.0);
    conv_forward(c3, h2.data(), p + L.conv3_w.offset, p + L.conv3_b.offset, a3.data());
    h3.resize(a3.size());
    std::transform(a3.begin(), a3.end(), h3.begin(), silu);
  }

  // dfeat: gradient w.r.t. h3 (consumed).
  void backward(const DetectorParams& params, std::vector<double>& dfeat, double* grad) const {
    const auto& L = params.layout();
    const double* p = params.values().data();
    for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat[i] *= silu_grad(a3[i]);
    std::vector<double> dh2(h2.size(), 0.0);
    conv_backward(c3, h2.data(), p + L.conv3_w.offset, dfeat.data(), dh2.data(),
                  grad + L.conv3_w.offset, grad + L.conv3_b.offset);
    for (std::size_t i = 0; i < dh2.size(); ++i) dh2[i] *= silu_grad(a2[i]);
    std::vector<double> dh1(h1.size(), 0.0);
    conv_backward(c2, h1.data(), p + L.conv2_w.offset, dh2.data(), dh1.data(),
                  grad + L.conv2_w.offset, grad + L.conv2_b.offset);
    for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] *= silu_grad(a1[i]);
    conv_backward(c1, x.data(), p + L.conv1_w.offset, dh1.data(), nullptr,
                  grad + L.conv1_w.offset, grad + L.conv1_b.offset);
  }
};

// Per-anchor objectness logit followed by four deltas.
std::vector<std::array<double, 5>> rpn_forward(const DetectorParams& params,
                                                const std::vector<double>& feat) {
  const auto& cfg = params.config();
  const auto& L = params.layout();
  const double* w = params.values().data() + L.rpn_w.offset;
  const double* b = params.values().data() + L.rpn_b.offset;
  const int C = cfg.conv3_channels;
  const int A = cfg.anchors_per_cell();
  const std::size_t cells = static_cast<std::size_t>(cfg.feature_height()) * cfg.feature_width();
  std::vector<std::array<double, 5>> out(cells * A);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    for (int a = 0; a < A; ++a) {
      for (int k = 0; k < 5; ++k) {
        const int r = a * 5 + k;
        double v = b[r];
        for (int c = 0; c < C; ++c) v += w[static_cast<std::size_t>(r) * C + c] * feat[c * cells + cell];
        out[cell * A + a][k] = v;
      }
    }
  }
  return out;
}

void rpn_backward(const DetectorParams& params, const std::vector<double>& feat,
                  const std::vector<std::array<double, 5>>& dout, std::vector<double>& dfeat,
                  double* grad) {
  const auto& cfg = params.config();
  const auto& L = params.layout();
  const double* w = params.values().data() + L.rpn_w.offset;
  double* dw = grad + L.rpn_w.offset;
  double* db = grad + L.rpn_b.offset;
  const int C = cfg.conv3_channels;
  const int A = cfg.anchors_per_cell();
  const std::size_t cells = static_cast<std::size_t>(cfg.feature_height()) * cfg.feature_width();
  for (std::size_t cell = 0; cell < cells; ++cell) {
    for (int a = 0; a < A; ++a) {
      for (int k = 0; k < 5; ++k) {
        const double g = dout[cell * A + a][k];
        if (g == 0.0) continue;
        const int r = a * 5 + k;
        db[r] += g;
        for (int c = 0; c < C; ++c) {
          dw[static_cast<std::size_t>(r) * C + c] += g * feat[c * cells + cell];
          dfeat[c * cells + cell] += g * w[static_cast<std::size_t>(r) * C + c];
        }
      }
    }
  }
}

std::vector<Proposal> make_proposals(const ModelConfig& cfg, const std::vector<Box>& anchors,
                                     const std::vector<std::array<double, 5>>& rpn) {
  struct Candidate {
    Box box;
    double logit;
    int anchor;
  };
  std::vector<Candidate> cands;
  cands.reserve(anchors.size());
  const double W = cfg.image_width, H = cfg.image_height;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Box raw = decode_box(anchors[i], {rpn[i][1], rpn[i][2], rpn[i][3], rpn[i][4]});
    const double x1 = std::clamp(raw.x, 0.0, W), y1 = std::clamp(raw.y, 0.0, H);
    const double x2 = std::clamp(raw.x2(), 0.0, W), y2 = std::clamp(raw.y2(), 0.0, H);
    if (x2 - x1 < 1.0 || y2 - y1 < 1.0) continue;
    cands.push_back({{x1, y1, x2 - x1, y2 - y1}, rpn[i][0], static_cast<int>(i)});
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.logit > b.logit; });
  std::vector<Proposal> kept;
  for (const auto& c : cands) {
    if (static_cast<int>(kept.size()) >= cfg.top_k) break;
    bool keep = true;
    for (const auto& k : kept) {
      if (iou(c.box, k.box) > cfg.rpn_nms_iou) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back({c.box, sigmoid(c.logit), c.anchor});
  }
  return kept;
}

// Per-ROI head activations.
struct RoiState {
  // Bilinear taps: for pooled sample q, four (cell, weight) pairs.
  std::vector<std::array<std::pair<std::size_t, double>, 4>> taps;
  std::vector<double> u, z, h, logits;
  std::array<double, 4> deltas{};
  double conf_logit = 0.0;
};

RoiState roi_forward(const DetectorParams& params, const std::vector<double>& feat,
                     const Box& box) {
  const auto& cfg = params.config();
  const auto& L = params.layout();
  const double* p = params.values().data();
  const int C = cfg.conv3_channels;
  const int fh = cfg.feature_height(), fw = cfg.feature_width();
  const std::size_t cells = static_cast<std::size_t>(fh) * fw;
  const int G = cfg.roi_pool;
  const int D = cfg.roi_input_size(), Hd = cfg.roi_hidden, K = cfg.num_classes + 1;
  const double stride = ModelConfig::kStride;
  const double ref = cfg.anchor_sizes.front();

  RoiState s;
  s.u.assign(D, 0.0);
  for (int gy = 0; gy < G; ++gy) {
    for (int gx = 0; gx < G; ++gx) {
      // Feature cell (i, j) is centred on pixel ((j + 0.5) * stride, (i + 0.5) * stride).
      const double fx = std::clamp((box.x + (gx + 0.5) / G * box.w) / stride - 0.5, 0.0, fw - 1.0);
      const double fy = std::clamp((box.y + (gy + 0.5) / G * box.h) / stride - 0.5, 0.0, fh - 1.0);
      const int x0 = std::min(static_cast<int>(fx), fw - 1), y0 = std::min(static_cast<int>(fy), fh - 1);
      const int x1 = std::min(x0 + 1, fw - 1), y1 = std::min(y0 + 1, fh - 1);
      const double ax = fx - x0, ay = fy - y0;
      auto cell = [&](int y, int x) { return static_cast<std::size_t>(y) * fw + x; };
      const std::array<std::pair<std::size_t, double>, 4> t = {
          {{cell(y0, x0), (1 - ay) * (1 - ax)}, {cell(y0, x1), (1 - ay) * ax},
           {cell(y1, x0), ay * (1 - ax)}, {cell(y1, x1), ay * ax}}};
      const int q = static_cast<int>(s.taps.size());
      for (int c = 0; c < C; ++c) {
        double v = 0.0;
        for (const auto& [idx, wgt] : t) v += wgt * feat[c * cells + idx];
        s.u[q * C + c] = v;
      }
      s.taps.push_back(t);
    }
  }
  const int g0 = G * G * C;
  s.u[g0 + 0] = std::log(box.w / ref);
  s.u[g0 + 1] = std::log(box.h / ref);
  s.u[g0 + 2] = box.cx() / cfg.image_width - 0.5;
  s.u[g0 + 3] = box.cy() / cfg.image_height - 0.5;

  s.z.resize(Hd);
  s.h.resize(Hd);
  const double* fcw = p + L.fc_w.offset;
  const double* fcb = p + L.fc_b.offset;
  for (int j = 0; j < Hd; ++j) {
    double v = fcb[j];
    for (int d = 0; d < D; ++d) v += fcw[static_cast<std::size_t>(j) * D + d] * s.u[d];
    s.z[j] = v;
    s.h[j] = silu(v);
  }
  s.logits.resize(K);
  const double* cw = p + L.cls_w.offset;
  const double* cb = p + L.cls_b.offset;
  for (int k = 0; k < K; ++k) {
    double v = cb[k];
    for (int j = 0; j < Hd; ++j) v += cw[static_cast<std::size_t>(k) * Hd + j] * s.h[j];
    s.logits[k] = v;
  }
  const double* bw = p + L.box_w.offset;
  const double* bb = p + L.box_b.offset;
  for (int k = 0; k < 4; ++k) {
    double v = bb[k];
    for (int j = 0; j < Hd; ++j) v += bw[static_cast<std::size_t>(k) * Hd + j] * s.h[j];
    s.deltas[k] = v;
  }
  const double* fw_ = p + L.conf_w.offset;
  double v = p[L.conf_b.offset];
  for (int j = 0; j < Hd; ++j) v += fw_[j] * s.h[j];
  s.conf_logit = v;
  return s;
}

void roi_backward(const DetectorParams& params, const RoiState& s, std::span<const double> dlogits,
                  const std::array<double, 4>& ddeltas, double dconf, std::vector<double>& dfeat,
                  double* grad) {
  const auto& cfg = params.config();
  const auto& L = params.layout();
  const double* p = params.values().data();
  const int C = cfg.conv3_channels;
  const std::size_t cells = static_cast<std::size_t>(cfg.feature_height()) * cfg.feature_width();
  const int D = cfg.roi_input_size(), Hd = cfg.roi_hidden, K = cfg.num_classes + 1;
  const int pooled = static_cast<int>(s.taps.size()) * C;
  std::vector<double> du(pooled, 0.0);

  std::vector<double> dh(Hd, 0.0);
  for (int k = 0; k < K; ++k) {
    const double g = dlogits[k];
    grad[L.cls_b.offset + k] += g;
    for (int j = 0; j < Hd; ++j) {
      const std::size_t idx = static_cast<std::size_t>(k) * Hd + j;
      grad[L.cls_w.offset + idx] += g * s.h[j];
      dh[j] += g * p[L.cls_w.offset + idx];
    }
  }
  for (int k = 0; k < 4; ++k) {
    const double g = ddeltas[k];
    if (g == 0.0) continue;
    grad[L.box_b.offset + k] += g;
    for (int j = 0; j < Hd; ++j) {
      const std::size_t idx = static_cast<std::size_t>(k) * Hd + j;
      grad[L.box_w.offset + idx] += g * s.h[j];
      dh[j] += g * p[L.box_w.offset + idx];
    }
  }
  if (dconf != 0.0) {
    grad[L.conf_b.offset] += dconf;
    for (int j = 0; j < Hd; ++j) {
      grad[L.conf_w.offset + j] += dconf * s.h[j];
      dh[j] += dconf * p[L.conf_w.offset + j];
    }
  }
  for (int j = 0; j < Hd; ++j) {
    const double dz = dh[j] * silu_grad(s.z[j]);
    grad[L.fc_b.offset + j] += dz;
    for (int d = 0; d < D; ++d) {
      const std::size_t idx = static_cast<std::size_t>(j) * D + d;
      grad[L.fc_w.offset + idx] += dz * s.u[d];
      if (d < pooled) du[d] += dz * p[L.fc_w.offset + idx];
    }
  }
  for (std::size_t q = 0; q < s.taps.size(); ++q)
    for (int c = 0; c < C; ++c) {
      const double g = du[q * C + c];
      if (g == 0.0) continue;
      for (const auto& [idx, wgt] : s.taps[q]) dfeat[c * cells + idx] += g * wgt;
    }
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - lse;
  return out;
}

double clamp_logit(double z) {
  return std::clamp(z, -kConfidenceLogitClamp, kConfidenceLogitClamp);
}

void check_image(const ModelConfig& cfg, const Image& image) {
  if (image.height() != cfg.image_height || image.width() != cfg.image_width) {
    throw ConfigError("image is " + std::to_string(image.height()) + "x" +
                      std::to_string(image.width()) + " but the detector expects " +
                      std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (image_height <= 0 || image_height % kStride != 0)
    fail("image_height", "must be a positive multiple of 4");
  if (image_width <= 0 || image_width % kStride != 0)
    fail("image_width", "must be a positive multiple of 4");
  if (num_classes < 1) fail("num_classes", "must be >= 1");
  if (conv1_channels < 1) fail("conv1_channels", "must be >= 1");
  if (conv2_channels < 1) fail("conv2_channels", "must be >= 1");
  if (conv3_channels < 1) fail("conv3_channels", "must be >= 1");
  if (roi_pool < 1 || roi_pool > 4) fail("roi_pool", "must be in 1..4");
  if (roi_hidden < 1) fail("roi_hidden", "must be >= 1");
  if (anchor_sizes.empty()) fail("anchor_sizes", "must not be empty");
  for (double s : anchor_sizes)
    if (!(s > 0.0) || !std::isfinite(s)) fail("anchor_sizes", "entries must be positive");
  if (anchor_ratios.empty()) fail("anchor_ratios", "must not be empty");
  for (double r : anchor_ratios)
    if (!(r > 0.0) || !std::isfinite(r)) fail("anchor_ratios", "entries must be positive");
  if (top_k < 1) fail("top_k", "must be >= 1");
  if (!(rpn_nms_iou >= 0.0 && rpn_nms_iou <= 1.0)) fail("rpn_nms_iou", "must be in [0, 1]");
  if (!(rpn_positive_iou > 0.0 && rpn_positive_iou <= 1.0))
    fail("rpn_positive_iou", "must be in (0, 1]");
  if (!(rpn_negative_iou >= 0.0 && rpn_negative_iou <= rpn_positive_iou))
    fail("rpn_negative_iou", "must be in [0, rpn_positive_iou]");
  if (!(roi_foreground_iou > 0.0 && roi_foreground_iou <= 1.0))
    fail("roi_foreground_iou", "must be in (0, 1]");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "image_height=" << image_height << ";image_width=" << image_width
     << ";num_classes=" << num_classes << ";conv=" << conv1_channels << "," << conv2_channels
     << "," << conv3_channels << ";roi_pool=" << roi_pool << ";roi_hidden=" << roi_hidden << ";anchor_sizes=";
  for (double s : anchor_sizes) os << fmt_double(s) << ",";
  os << ";anchor_ratios=";
  for (double r : anchor_ratios) os << fmt_double(r) << ",";
  os << ";top_k=" << top_k << ";rpn_nms_iou=" << fmt_double(rpn_nms_iou)
     << ";rpn_positive_iou=" << fmt_double(rpn_positive_iou)
     << ";rpn_negative_iou=" << fmt_double(rpn_negative_iou)
     << ";roi_foreground_iou=" << fmt_double(roi_foreground_iou);
  return os.str();
}

std::uint64_t ModelConfig::digest() const { return fnv1a64(canonical()); }

const char* to_string(ParamBlock block) {
  switch (block) {
    case ParamBlock::Backbone: return "backbone";
    case ParamBlock::RpnHead: return "rpn_head";
    case ParamBlock::RoiHead: return "roi_head";
    case ParamBlock::ConfHead: return "conf_head";
  }
  return "?";
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  std::size_t cursor = 0;
  auto take = [&](std::size_t n) {
    TensorSlot t{cursor, n};
    cursor += n;
    return t;
  };
  const std::size_t c1 = cfg.conv1_channels, c2 = cfg.conv2_channels, c3 = cfg.conv3_channels;
  const std::size_t A = cfg.anchors_per_cell();
  const std::size_t D = cfg.roi_input_size(), Hd = cfg.roi_hidden, K = cfg.num_classes + 1;
  conv1_w = take(c1 * 3 * 25);
  conv1_b = take(c1);
  conv2_w = take(c2 * c1 * 9);
  conv2_b = take(c2);
  conv3_w = take(c3 * c2 * 9);
  conv3_b = take(c3);
  rpn_w = take(A * 5 * c3);
  rpn_b = take(A * 5);
  fc_w = take(Hd * D);
  fc_b = take(Hd);
  cls_w = take(K * Hd);
  cls_b = take(K);
  box_w = take(4 * Hd);
  box_b = take(4);
  conf_w = take(Hd);
  conf_b = take(1);
  total = cursor;
}

TensorSlot ParamLayout::block(ParamBlock b) const {
  switch (b) {
    case ParamBlock::Backbone: return {conv1_w.offset, rpn_w.offset - conv1_w.offset};
    case ParamBlock::RpnHead: return {rpn_w.offset, fc_w.offset - rpn_w.offset};
    case ParamBlock::RoiHead: return {fc_w.offset, conf_w.offset - fc_w.offset};
    case ParamBlock::ConfHead: return {conf_w.offset, total - conf_w.offset};
  }
  return {};
}

DetectorParams::DetectorParams(ModelConfig config)
    : config_(std::move(config)), layout_(config_), values_(layout_.total, 0.0) {
  config_.validate();
}

DetectorParams DetectorParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  DetectorParams params(config);
  Rng rng(derive_seed(seed, 0x1417));
  const auto& L = params.layout_;
  auto fill = [&](TensorSlot slot, double stddev) {
    for (std::size_t i = 0; i < slot.size; ++i) params.values_[slot.offset + i] = stddev * normal(rng);
  };
  fill(L.conv1_w, std::sqrt(2.0 / (3 * 25)));
  fill(L.conv2_w, std::sqrt(2.0 / (config.conv1_channels * 9)));
  fill(L.conv3_w, std::sqrt(2.0 / (config.conv2_channels * 9)));
  fill(L.rpn_w, 0.01);
  fill(L.fc_w, std::sqrt(2.0 / config.roi_input_size()));
  fill(L.cls_w, 0.01);
  fill(L.box_w, 0.001);
  fill(L.conf_w, 0.01);
  return params;
}

std::span<double> DetectorParams::block(ParamBlock b) {
  const auto slot = layout_.block(b);
  return std::span<double>(values_).subspan(slot.offset, slot.size);
}

std::span<const double> DetectorParams::block(ParamBlock b) const {
  const auto slot = layout_.block(b);
  return std::span<const double>(values_).subspan(slot.offset, slot.size);
}

bool DetectorParams::same_architecture(const DetectorParams& other) const {
  return config_.canonical() == other.config_.canonical() && values_.size() == other.values_.size();
}

bool DetectorParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::vector<Box> anchor_boxes(const ModelConfig& cfg) {
  std::vector<Box> anchors;
  anchors.reserve(cfg.num_anchors());
  const double stride = ModelConfig::kStride;
  for (int gy = 0; gy < cfg.feature_height(); ++gy) {
    for (int gx = 0; gx < cfg.feature_width(); ++gx) {
      const double cx = (gx + 0.5) * stride, cy = (gy + 0.5) * stride;
      for (double size : cfg.anchor_sizes) {
        for (double ratio : cfg.anchor_ratios) {
          const double w = size * std::sqrt(ratio), h = size / std::sqrt(ratio);
          anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, w, h});
        }
      }
    }
  }
  return anchors;
}

std::array<double, 4> encode_box(const Box& ref, const Box& t) {
  return {(t.cx() - ref.cx()) / ref.w, (t.cy() - ref.cy()) / ref.h, std::log(t.w / ref.w),
          std::log(t.h / ref.h)};
}

Box decode_box(const Box& ref, const std::array<double, 4>& d) {
  const double cx = ref.cx() + d[0] * ref.w;
  const double cy = ref.cy() + d[1] * ref.h;
  const double w = ref.w * std::exp(std::min(d[2], kMaxLogRatio));
  const double h = ref.h * std::exp(std::min(d[3], kMaxLogRatio));
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double confidence_from_logit(double z) { return sigmoid(clamp_logit(z)); }

double confidence_loss(std::span<const double> taus) {
  double sum = 0.0;
  for (double t : taus) sum += -std::log(t);
  return sum;
}

std::vector<double> interpolate(std::span<const double> p, std::span<const double> y, double tau) {
  if (p.size() != y.size()) throw ConfigError("interpolate: probability and label sizes differ");
  const double t = std::clamp(tau, 0.0, 1.0);
  std::vector<double> out(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) out[k] = t * p[k] + (1.0 - t) * y[k];
  return out;
}

DetectorOutput forward(const DetectorParams& params, const Image& image) {
  const auto& cfg = params.config();
  check_image(cfg, image);
  Backbone bb(cfg);
  bb.run(params, image);
  const auto rpn = rpn_forward(params, bb.h3);
  DetectorOutput out;
  out.proposals = make_proposals(cfg, anchor_boxes(cfg), rpn);
  const double W = cfg.image_width, H = cfg.image_height;
  for (const auto& prop : out.proposals) {
    const RoiState s = roi_forward(params, bb.h3, prop.box);
    const auto logp = log_softmax(s.logits);
    Detection det;
    det.class_probs.resize(logp.size());
    for (std::size_t k = 0; k < logp.size(); ++k) det.class_probs[k] = std::exp(logp[k]);
    det.class_id = 1;
    for (int k = 2; k <= cfg.num_classes; ++k)
      if (det.class_probs[k] > det.class_probs[det.class_id]) det.class_id = k;
    det.score = det.class_probs[det.class_id];
    det.confidence = confidence_from_logit(s.conf_logit);
    std::array<double, 4> d = s.deltas;
    for (int k = 0; k < 4; ++k) d[k] *= kRoiDeltaStd[k];
    const Box raw = decode_box(prop.box, d);
    const double x1 = std::clamp(raw.x, 0.0, W), y1 = std::clamp(raw.y, 0.0, H);
    const double x2 = std::clamp(raw.x2(), 0.0, W), y2 = std::clamp(raw.y2(), 0.0, H);
    det.box = (x2 - x1 > 0.0 && y2 - y1 > 0.0) ? Box{x1, y1, x2 - x1, y2 - y1} : prop.box;
    out.detections.push_back(std::move(det));
  }
  return out;
}

std::vector<Detection> predict_rois(const DetectorParams& params, const Image& image,
                                    const std::vector<Box>& boxes) {
  const auto& cfg = params.config();
  check_image(cfg, image);
  Backbone bb(cfg);
  bb.run(params, image);
  std::vector<Detection> out;
  for (const auto& box : boxes) {
    const RoiState s = roi_forward(params, bb.h3, box);
    const auto logp = log_softmax(s.logits);
    Detection det;
    det.box = box;
    det.class_probs.resize(logp.size());
    for (std::size_t k = 0; k < logp.size(); ++k) det.class_probs[k] = std::exp(logp[k]);
    det.class_id = 1;
    for (int k = 2; k <= cfg.num_classes; ++k)
      if (det.class_probs[k] > det.class_probs[det.class_id]) det.class_id = k;
    det.score = det.class_probs[det.class_id];
    det.confidence = confidence_from_logit(s.conf_logit);
    out.push_back(std::move(det));
  }
  return out;
}

TrainingSample assign_targets(const ModelConfig& cfg, const std::vector<Proposal>& proposals,
                              const std::vector<LabeledBox>& gts) {
  const auto anchors = anchor_boxes(cfg);
  TrainingSample s;
  s.anchor_labels.assign(anchors.size(), 0);
  s.anchor_targets.assign(anchors.size(), {0.0, 0.0, 0.0, 0.0});

  if (!gts.empty()) {
    std::vector<double> best_for_gt(gts.size(), 0.0);
    std::vector<std::vector<double>> overlaps(anchors.size(), std::vector<double>(gts.size()));
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      for (std::size_t g = 0; g < gts.size(); ++g) {
        overlaps[a][g] = iou(anchors[a], gts[g].box);
        best_for_gt[g] = std::max(best_for_gt[g], overlaps[a][g]);
      }
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      std::size_t arg = 0;
      for (std::size_t g = 1; g < gts.size(); ++g)
        if (overlaps[a][g] > overlaps[a][arg]) arg = g;
      const double best = overlaps[a][arg];
      bool positive = best >= cfg.rpn_positive_iou;
      // Every ground truth keeps at least its best-overlapping anchors.
      for (std::size_t g = 0; g < gts.size(); ++g)
        if (best_for_gt[g] > 0.0 && overlaps[a][g] == best_for_gt[g]) {
          positive = true;
          arg = g;
          break;
        }
      if (positive) {
        s.anchor_labels[a] = 1;
        s.anchor_targets[a] = encode_box(anchors[a], gts[arg].box);
      } else if (best <= cfg.rpn_negative_iou) {
        s.anchor_labels[a] = 0;
      } else {
        s.anchor_labels[a] = -1;
      }
    }
  }

  for (const auto& p : proposals) s.rois.push_back(p.box);
  for (const auto& g : gts) s.rois.push_back(g.box);
  s.roi_classes.assign(s.rois.size(), 0);
  s.roi_targets.assign(s.rois.size(), {0.0, 0.0, 0.0, 0.0});
  for (std::size_t r = 0; r < s.rois.size(); ++r) {
    double best = 0.0;
    std::size_t arg = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double o = iou(s.rois[r], gts[g].box);
      if (o > best) {
        best = o;
        arg = g;
      }
    }
    if (arg < gts.size() && best >= cfg.roi_foreground_iou) {
      s.roi_classes[r] = gts[arg].class_id;
      auto t = encode_box(s.rois[r], gts[arg].box);
      for (int k = 0; k < 4; ++k) t[k] /= kRoiDeltaStd[k];
      s.roi_targets[r] = t;
    }
  }
  return s;
}

LossTerms evaluate_loss(const DetectorParams& params, const Image& image,
                        const std::vector<LabeledBox>& gts, const LossOptions& options,
                        const TrainingSample* frozen, std::vector<double>* grad,
                        TrainingSample* sample_out) {
  const auto& cfg = params.config();
  check_image(cfg, image);
  for (const auto& g : gts) {
    if (!g.box.valid()) throw ConfigError("ground-truth box is degenerate");
    if (g.class_id < 1 || g.class_id > cfg.num_classes)
      throw ConfigError("ground-truth class " + std::to_string(g.class_id) + " outside 1.." +
                        std::to_string(cfg.num_classes));
  }
  if (grad && grad->size() != params.size()) grad->assign(params.size(), 0.0);

  Backbone bb(cfg);
  bb.run(params, image);
  const auto rpn = rpn_forward(params, bb.h3);

  TrainingSample local;
  if (!frozen) {
    local = assign_targets(cfg, make_proposals(cfg, anchor_boxes(cfg), rpn), gts);
    frozen = &local;
  }
  const TrainingSample& s = *frozen;
  if (s.anchor_labels.size() != rpn.size()) throw ConfigError("frozen sample does not fit model");
  const bool soft = options.labels == RoiLabels::Soft;
  if (soft && options.tau_override && options.tau_override->size() != s.rois.size())
    throw ConfigError("tau override needs one value per sampled ROI");

  LossTerms terms;
  const double wdet = options.det_weight;
  const double wconf = options.confidence_weight;

  // RPN.
  std::vector<std::array<double, 5>> drpn(rpn.size(), {0, 0, 0, 0, 0});
  std::size_t n_valid = 0, n_pos = 0;
  for (auto l : s.anchor_labels) {
    n_valid += l >= 0;
    n_pos += l == 1;
  }
  for (std::size_t a = 0; a < rpn.size(); ++a) {
    const int label = s.anchor_labels[a];
    if (label < 0) continue;
    const double o = rpn[a][0];
    terms.rpn_cls += softplus(o) - label * o;
    drpn[a][0] = wdet * (sigmoid(o) - label) / static_cast<double>(n_valid);
    if (label == 1) {
      for (int k = 0; k < 4; ++k) {
        const double r = rpn[a][k + 1] - s.anchor_targets[a][k];
        terms.rpn_reg += smooth_l1(r);
        drpn[a][k + 1] = wdet * smooth_l1_grad(r) / static_cast<double>(n_pos);
      }
    }
  }
  if (n_valid > 0) terms.rpn_cls /= static_cast<double>(n_valid);
  if (n_pos > 0) terms.rpn_reg /= static_cast<double>(n_pos);

  // ROI head.
  const std::size_t n_roi = s.rois.size();
  std::size_t n_fg = 0;
  for (int c : s.roi_classes) n_fg += c > 0;
  terms.num_rois = n_roi;
  std::vector<double> dfeat(bb.h3.size(), 0.0);
  const int K = cfg.num_classes + 1;
  std::vector<double> dlogits(K);
  for (std::size_t r = 0; r < n_roi; ++r) {
    const RoiState st = roi_forward(params, bb.h3, s.rois[r]);
    const auto logp = log_softmax(st.logits);
    const int target = s.roi_classes[r];
    const double z = st.conf_logit;
    const double tau_model = confidence_from_logit(z);
    const bool z_active = std::abs(z) < kConfidenceLogitClamp;
    terms.tau_mean += tau_model;
    double dz = 0.0;

    if (!soft) {
      terms.roi_cls += -logp[target];
      for (int k = 0; k < K; ++k)
        dlogits[k] = wdet * (std::exp(logp[k]) - (k == target ? 1.0 : 0.0)) / static_cast<double>(n_roi);
    } else {
      const double tau = options.tau_override ? std::clamp((*options.tau_override)[r], 0.0, 1.0)
                                              : tau_model;
      double entropy = 0.0;
      double dtau = 0.0;
      double loss = 0.0;
      std::vector<double> prob(K), soft_target(K);
      for (int k = 0; k < K; ++k) {
        prob[k] = std::exp(logp[k]);
        const double y = k == target ? 1.0 : 0.0;
        soft_target[k] = tau * prob[k] + (1.0 - tau) * y;
        loss += soft_target[k] * logp[k];
        entropy -= prob[k] * logp[k];
        dtau -= (prob[k] - y) * logp[k];
      }
      terms.roi_cls += -loss;
      for (int k = 0; k < K; ++k) {
        const double g = (prob[k] - soft_target[k]) - tau * prob[k] * (logp[k] + entropy);
        dlogits[k] = wdet * g / static_cast<double>(n_roi);
      }
      if (!options.tau_override && z_active)
        dz += wdet * dtau * tau_model * (1.0 - tau_model) / static_cast<double>(n_roi);
    }

    // -log(sigmoid(z)) == softplus(-z)
    terms.confidence += softplus(-clamp_logit(z));
    if (wconf != 0.0 && z_active)
      dz += wconf * (tau_model - 1.0) / (options.confidence_mean ? static_cast<double>(n_roi) : 1.0);

    std::array<double, 4> ddeltas{0.0, 0.0, 0.0, 0.0};
    if (target > 0) {
      for (int k = 0; k < 4; ++k) {
        const double res = st.deltas[k] - s.roi_targets[r][k];
        terms.roi_reg += smooth_l1(res);
        ddeltas[k] = wdet * smooth_l1_grad(res) / static_cast<double>(n_fg);
      }
    }
    if (grad) roi_backward(params, st, dlogits, ddeltas, dz, dfeat, grad->data());
  }
  if (n_roi > 0) {
    terms.roi_cls /= static_cast<double>(n_roi);
    terms.tau_mean /= static_cast<double>(n_roi);
  }
  if (n_fg > 0) terms.roi_reg /= static_cast<double>(n_fg);

  if (grad) {
    rpn_backward(params, bb.h3, drpn, dfeat, grad->data());
    bb.backward(params, dfeat, grad->data());
  }
  if (sample_out && sample_out != frozen) *sample_out = s;
  return terms;
}

double loss_det(const DetectorParams& params, const Image& image,
                const std::vector<LabeledBox>& gts) {
  return evaluate_loss(params, image, gts, {}, nullptr, nullptr).det();
}

double loss_det_soft(const DetectorParams& params, const Image& image,
                     const std::vector<LabeledBox>& gts) {
  LossOptions opt;
  opt.labels = RoiLabels::Soft;
  return evaluate_loss(params, image, gts, opt, nullptr, nullptr).det();
}

}  // namespace umt
