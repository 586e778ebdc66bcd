#include "vmp/unet.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace vmp {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using MapConstMat = Eigen::Map<const Mat>;

// Zero-pad that tolerates sigma == 0 (deterministic collapse); the public
// pad_moments op keeps its sigma_pa > 0 contract.
RandomTensor pad_impl(const RandomTensor& g, int width, double sigma) {
  if (width == 0) return g;
  if (sigma > 0.0) return pad_moments(g, width, sigma);
  const std::size_t h = g.mean.dim(0), w = g.mean.dim(1), c = g.mean.dim(2);
  const std::size_t nw = static_cast<std::size_t>(width);
  RandomTensor out(Tensor({h + 2 * nw, w + 2 * nw, c}, 0.0),
                   Tensor({h + 2 * nw, w + 2 * nw, c}, 0.0));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        out.mean.at(y + nw, x + nw, ch) = g.mean.at(y, x, ch);
        out.var.at(y + nw, x + nw, ch) = g.var.at(y, x, ch);
      }
    }
  }
  return out;
}

ConvLayerParams make_layer(int kh, int kw, int in_ch, int out_ch, Rng& rng,
                           double init_var) {
  ConvLayerParams layer;
  layer.kh = kh;
  layer.kw = kw;
  layer.in_channels = in_ch;
  layer.out_channels = out_ch;
  const std::size_t len = static_cast<std::size_t>(kh) * kw * in_ch;
  const double he_std = std::sqrt(2.0 / static_cast<double>(len));
  const double rho0 = softplus_inverse(init_var);
  layer.kernels.resize(out_ch);
  for (auto& k : layer.kernels) {
    k.kh = kh;
    k.kw = kw;
    k.in_channels = in_ch;
    k.mean.resize(len);
    k.rho.assign(len, rho0);
    for (auto& m : k.mean) m = he_std * rng.normal();
  }
  return layer;
}

}  // namespace

std::size_t VariationalModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) {
    n += 2 * layer.kernels.size() * layer.kernels.front().length();
  }
  return n;
}

Gradients Gradients::zeros_like(const VariationalModel& model) {
  Gradients g;
  g.d_mean.resize(model.layers.size());
  g.d_rho.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::size_t n =
        model.layers[i].kernels.size() * model.layers[i].kernels.front().length();
    g.d_mean[i].assign(n, 0.0);
    g.d_rho[i].assign(n, 0.0);
  }
  return g;
}

void Gradients::add_scaled(const Gradients& other, double scale) {
  for (std::size_t i = 0; i < d_mean.size(); ++i) {
    for (std::size_t j = 0; j < d_mean[i].size(); ++j) {
      d_mean[i][j] += scale * other.d_mean[i][j];
      d_rho[i][j] += scale * other.d_rho[i][j];
    }
  }
}

bool Gradients::all_finite() const {
  for (const auto& v : d_mean)
    for (double x : v)
      if (!std::isfinite(x)) return false;
  for (const auto& v : d_rho)
    for (double x : v)
      if (!std::isfinite(x)) return false;
  return true;
}

VariationalModel build(const NetworkConfig& cfg, std::uint64_t seed) {
  const std::size_t e = cfg.encoder_kernels.size();
  const std::size_t d = cfg.decoder_kernels.size();
  if (e < 2) throw GeometryError("build: need at least two encoder blocks");
  if (d != e - 1) {
    throw GeometryError("build: decoder depth must be encoder depth - 1");
  }
  for (std::size_t k : cfg.encoder_kernels)
    if (k == 0) throw GeometryError("build: kernel counts must be positive");
  for (std::size_t k : cfg.decoder_kernels)
    if (k == 0) throw GeometryError("build: kernel counts must be positive");
  if (cfg.input_h != cfg.input_w) {
    throw GeometryError("build: only square inputs are supported");
  }
  if (cfg.kernel_size < 1 || cfg.kernel_size % 2 == 0) {
    throw GeometryError("build: kernel size must be odd");
  }
  if (cfg.num_classes < 2) throw GeometryError("build: need >= 2 classes");
  if (cfg.sigma_pa <= 0.0) throw GeometryError("build: sigma_pa must be > 0");

  const int shrink = cfg.kernel_size - 1;  // per un-padded convolution
  VariationalModel model;
  model.cfg = cfg;

  // Encoder spatial sizes.
  std::size_t cur = cfg.input_h;
  model.encoder_sizes.resize(e);
  for (std::size_t b = 0; b < e; ++b) {
    if (cur <= static_cast<std::size_t>(2 * shrink)) {
      throw GeometryError("build: input too small for encoder depth");
    }
    cur -= 2 * shrink;
    model.encoder_sizes[b] = cur;
    if (b + 1 < e) cur = (cur + 1) / 2;
  }

  // Decoder plan: solve pad widths (and parity crops) so that the skip
  // concatenation is legal and the final output restores the input size.
  cur = model.encoder_sizes[e - 1];
  model.decoder_plan.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    DecoderPlan& plan = model.decoder_plan[j];
    plan.skip_block = e - 2 - j;
    const std::size_t skip = model.encoder_sizes[plan.skip_block];
    const std::size_t u = 2 * cur - 1;  // up-sample then 2x2 convolution
    plan.upconv_out = u;

    std::size_t concat = (u <= skip) ? u + 2 * ((skip - u) / 2) : skip;
    const bool last = (j + 1 == d);
    if (last) {
      // conv(-shrink), pad(+2 w2), conv(-shrink) must land on input_h.
      if ((cfg.input_h % 2) != (concat % 2)) concat -= 1;
      const std::ptrdiff_t w2_twice = static_cast<std::ptrdiff_t>(cfg.input_h) -
                                      static_cast<std::ptrdiff_t>(concat) +
                                      2 * shrink;
      if (w2_twice < 0 || w2_twice % 2 != 0) {
        throw GeometryError("build: cannot restore input size in last block");
      }
      plan.pad_before_conv2 = static_cast<int>(w2_twice / 2);
      plan.out_size = cfg.input_h;
    } else {
      plan.pad_before_conv2 = shrink;  // size-preserving through both convs
      plan.out_size = concat;
    }
    plan.concat_size = concat;
    plan.pad_before_concat =
        (concat > u) ? static_cast<int>((concat - u + 1) / 2) : 0;
    if (concat < 1 || concat > skip) {
      throw GeometryError("build: decoder/skip sizes incompatible");
    }
    if (static_cast<std::ptrdiff_t>(concat) - 2 * shrink +
            2 * plan.pad_before_conv2 <
        1) {
      throw GeometryError("build: decoder block collapses to zero size");
    }
    cur = plan.out_size;
  }

  // Parameters.
  Rng root(seed);
  const double init_var = 1e-4;
  std::size_t layer_id = 0;
  auto layer_rng = [&]() { return root.split(0x10000 + layer_id++); };
  for (std::size_t b = 0; b < e; ++b) {
    const int in_ch = (b == 0) ? static_cast<int>(cfg.in_channels)
                               : static_cast<int>(cfg.encoder_kernels[b - 1]);
    const int out_ch = static_cast<int>(cfg.encoder_kernels[b]);
    Rng r1 = layer_rng();
    model.layers.push_back(make_layer(cfg.kernel_size, cfg.kernel_size, in_ch,
                                      out_ch, r1, init_var));
    Rng r2 = layer_rng();
    model.layers.push_back(make_layer(cfg.kernel_size, cfg.kernel_size, out_ch,
                                      out_ch, r2, init_var));
  }
  for (std::size_t j = 0; j < d; ++j) {
    const int in_ch = (j == 0) ? static_cast<int>(cfg.encoder_kernels[e - 1])
                               : static_cast<int>(cfg.decoder_kernels[j - 1]);
    const int out_ch = static_cast<int>(cfg.decoder_kernels[j]);
    const int skip_ch =
        static_cast<int>(cfg.encoder_kernels[model.decoder_plan[j].skip_block]);
    Rng r1 = layer_rng();
    model.layers.push_back(make_layer(2, 2, in_ch, out_ch, r1, init_var));
    Rng r2 = layer_rng();
    model.layers.push_back(make_layer(cfg.kernel_size, cfg.kernel_size,
                                      out_ch + skip_ch, out_ch, r2, init_var));
    Rng r3 = layer_rng();
    model.layers.push_back(make_layer(cfg.kernel_size, cfg.kernel_size, out_ch,
                                      out_ch, r3, init_var));
  }
  Rng rf = layer_rng();
  model.layers.push_back(make_layer(
      1, 1, static_cast<int>(cfg.decoder_kernels[d - 1]),
      static_cast<int>(cfg.num_classes), rf, init_var));
  return model;
}

SegmentationOutput forward(const VariationalModel& model, const Tensor& image,
                           ForwardTape* tape, bool zero_variance) {
  const NetworkConfig& cfg = model.cfg;
  if (image.rank() != 3 || image.dim(0) != cfg.input_h ||
      image.dim(1) != cfg.input_w || image.dim(2) != cfg.in_channels) {
    throw GeometryError("forward: image shape does not match config");
  }
  if (cfg.mode == ModelMode::deterministic) zero_variance = true;
  model.forward_calls++;

  ForwardTape local;
  ForwardTape& t = tape ? *tape : local;
  t.conv.resize(model.layers.size());
  t.relu.resize(model.layers.size());
  t.pool.resize(model.encoder_blocks() - 1);
  t.ops_visited = 0;

  const std::size_t e = model.encoder_blocks();
  const std::size_t d = model.decoder_blocks();
  const double sigma = zero_variance ? 0.0 : cfg.sigma_pa;

  std::size_t current_layer = 0;
  auto guarded = [&](std::size_t layer_idx, auto&& fn) {
    current_layer = layer_idx;
    try {
      return fn();
    } catch (const DataError& err) {
      throw DataError("layer " + std::to_string(layer_idx) + ": " + err.what());
    }
  };

  RandomTensor cur = RandomTensor::deterministic(image);
  std::vector<RandomTensor> skips(e);

  for (std::size_t b = 0; b < e; ++b) {
    for (std::size_t which = 0; which < 2; ++which) {
      const std::size_t li = model.enc_conv(b, which);
      cur = guarded(li, [&] {
        return conv_moments(cur, model.layers[li].kernels, 1, 0, &t.conv[li],
                            zero_variance);
      });
      ++t.ops_visited;
      cur = relu_moments(cur, &t.relu[li]);
      ++t.ops_visited;
    }
    if (b + 1 < e) {
      skips[b] = cur;
      cur = maxpool_moments(cur, &t.pool[b]);
      ++t.ops_visited;
    }
  }

  for (std::size_t j = 0; j < d; ++j) {
    const DecoderPlan& plan = model.decoder_plan[j];
    cur = upsample_moments(cur);
    const std::size_t up_li = model.dec_upconv(j);
    cur = guarded(up_li, [&] {
      return conv_moments(cur, model.layers[up_li].kernels, 1, 0,
                          &t.conv[up_li], zero_variance);
    });
    ++t.ops_visited;  // up-convolution counts as one op
    if (plan.pad_before_concat > 0) {
      cur = pad_impl(cur, plan.pad_before_concat, sigma);
      ++t.ops_visited;
    }
    if (cur.mean.dim(0) > plan.concat_size) {
      cur = crop_to(cur, plan.concat_size, plan.concat_size);
      ++t.ops_visited;
    }
    RandomTensor skip = skips[plan.skip_block];
    if (skip.mean.dim(0) > plan.concat_size) {
      skip = crop_to(skip, plan.concat_size, plan.concat_size);
      ++t.ops_visited;
    }
    cur = concat_moments(cur, skip);
    ++t.ops_visited;

    const std::size_t c1 = model.dec_conv(j, 0);
    cur = guarded(c1, [&] {
      return conv_moments(cur, model.layers[c1].kernels, 1, 0, &t.conv[c1],
                          zero_variance);
    });
    ++t.ops_visited;
    cur = relu_moments(cur, &t.relu[c1]);
    ++t.ops_visited;
    cur = pad_impl(cur, plan.pad_before_conv2, sigma);
    ++t.ops_visited;
    const std::size_t c2 = model.dec_conv(j, 1);
    cur = guarded(c2, [&] {
      return conv_moments(cur, model.layers[c2].kernels, 1, 0, &t.conv[c2],
                          zero_variance);
    });
    ++t.ops_visited;
    cur = relu_moments(cur, &t.relu[c2]);
    ++t.ops_visited;
  }

  const std::size_t fi = model.final_conv();
  cur = guarded(fi, [&] {
    return conv_moments(cur, model.layers[fi].kernels, 1, 0, &t.conv[fi],
                        zero_variance);
  });
  ++t.ops_visited;
  t.logits = cur;
  t.softmax = softmax_moments(cur);
  ++t.ops_visited;

  const std::size_t h = cfg.input_h, w = cfg.input_w, c = cfg.num_classes;
  SegmentationOutput out;
  out.prob_mean = t.softmax.prob_mean;
  out.uncertainty = Tensor({h, w, c});
  out.class_map.resize(h * w);
  for (std::size_t px = 0; px < h * w; ++px) {
    const double* pm = out.prob_mean.data.data() + px * c;
    const double* cov = t.softmax.cov.data.data() + px * c * c;
    std::size_t best = 0;
    for (std::size_t i = 0; i < c; ++i) {
      out.uncertainty.data[px * c + i] = cov[i * c + i];
      if (pm[i] > pm[best]) best = i;
    }
    out.class_map[px] = static_cast<std::uint8_t>(best);
  }
  out.ops_visited = t.ops_visited;
  (void)current_layer;
  return out;
}

// ---------------------------------------------------------------------------
// Deterministic mean-only path (the baseline U-Net forward).
// ---------------------------------------------------------------------------

namespace {

Tensor det_conv(const Tensor& in, const ConvLayerParams& layer) {
  PatchMatrix pm = extract_patches(in, layer.kh, layer.kw, 1, 0);
  const std::size_t j = pm.rows, len = pm.cols, k = layer.kernels.size();
  Mat wm(len, k);
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t l = 0; l < len; ++l) wm(l, kk) = layer.kernels[kk].mean[l];
  Tensor out({pm.out_h, pm.out_w, k});
  MapMat o(out.data.data(), j, k);
  MapConstMat m(pm.data.data.data(), j, len);
  o.noalias() = m * wm;
  return out;
}

Tensor det_relu(Tensor in) {
  for (auto& v : in.data) v = std::max(v, 0.0);
  return in;
}

Tensor det_pool(const Tensor& in) {
  const std::size_t h = in.dim(0), w = in.dim(1), c = in.dim(2);
  Tensor out({(h + 1) / 2, (w + 1) / 2, c},
             -std::numeric_limits<double>::infinity());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.at(y / 2, x / 2, ch) = std::max(out.at(y / 2, x / 2, ch),
                                            in.at(y, x, ch));
  return out;
}

Tensor det_upsample(const Tensor& in) {
  const std::size_t h = in.dim(0), w = in.dim(1), c = in.dim(2);
  Tensor out({2 * h, 2 * w, c}, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.at(2 * y, 2 * x, ch) = in.at(y, x, ch);
  return out;
}

Tensor det_pad(const Tensor& in, int width) {
  if (width == 0) return in;
  const std::size_t h = in.dim(0), w = in.dim(1), c = in.dim(2);
  const std::size_t nw = static_cast<std::size_t>(width);
  Tensor out({h + 2 * nw, w + 2 * nw, c}, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.at(y + nw, x + nw, ch) = in.at(y, x, ch);
  return out;
}

Tensor det_crop(const Tensor& in, std::size_t th, std::size_t tw) {
  const std::size_t oy = (in.dim(0) - th) / 2, ox = (in.dim(1) - tw) / 2;
  const std::size_t c = in.dim(2);
  Tensor out({th, tw, c});
  for (std::size_t y = 0; y < th; ++y)
    for (std::size_t x = 0; x < tw; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.at(y, x, ch) = in.at(y + oy, x + ox, ch);
  return out;
}

Tensor det_concat(const Tensor& a, const Tensor& b) {
  const std::size_t h = a.dim(0), w = a.dim(1), c1 = a.dim(2), c2 = b.dim(2);
  Tensor out({h, w, c1 + c2});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c1; ++ch) out.at(y, x, ch) = a.at(y, x, ch);
      for (std::size_t ch = 0; ch < c2; ++ch)
        out.at(y, x, c1 + ch) = b.at(y, x, ch);
    }
  return out;
}

}  // namespace

Tensor deterministic_forward(const VariationalModel& model,
                             const Tensor& image) {
  const NetworkConfig& cfg = model.cfg;
  if (image.rank() != 3 || image.dim(0) != cfg.input_h ||
      image.dim(1) != cfg.input_w || image.dim(2) != cfg.in_channels) {
    throw GeometryError("deterministic_forward: image shape mismatch");
  }
  const std::size_t e = model.encoder_blocks(), d = model.decoder_blocks();
  Tensor cur = image;
  std::vector<Tensor> skips(e);
  for (std::size_t b = 0; b < e; ++b) {
    cur = det_relu(det_conv(cur, model.layers[model.enc_conv(b, 0)]));
    cur = det_relu(det_conv(cur, model.layers[model.enc_conv(b, 1)]));
    if (b + 1 < e) {
      skips[b] = cur;
      cur = det_pool(cur);
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    const DecoderPlan& plan = model.decoder_plan[j];
    cur = det_conv(det_upsample(cur), model.layers[model.dec_upconv(j)]);
    cur = det_pad(cur, plan.pad_before_concat);
    if (cur.dim(0) > plan.concat_size)
      cur = det_crop(cur, plan.concat_size, plan.concat_size);
    Tensor skip = skips[plan.skip_block];
    if (skip.dim(0) > plan.concat_size)
      skip = det_crop(skip, plan.concat_size, plan.concat_size);
    cur = det_concat(cur, skip);
    cur = det_relu(det_conv(cur, model.layers[model.dec_conv(j, 0)]));
    cur = det_pad(cur, plan.pad_before_conv2);
    cur = det_relu(det_conv(cur, model.layers[model.dec_conv(j, 1)]));
  }
  cur = det_conv(cur, model.layers[model.final_conv()]);
  // Softmax per pixel.
  const std::size_t c = cfg.num_classes, npix = cfg.input_h * cfg.input_w;
  for (std::size_t px = 0; px < npix; ++px) {
    double* row = cur.data.data() + px * c;
    double mx = row[0];
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      row[i] = std::exp(row[i] - mx);
      z += row[i];
    }
    for (std::size_t i = 0; i < c; ++i) row[i] /= z;
  }
  return cur;
}

void backward(const VariationalModel& model, const ForwardTape& tape,
              const Tensor& g_prob, const Tensor& g_cov, Gradients& grads,
              Tensor* g_image, bool zero_variance) {
  if (model.cfg.mode == ModelMode::deterministic) zero_variance = true;
  if (tape.conv.size() != model.layers.size()) {
    throw DataError("backward: tape does not match model");
  }
  const std::size_t e = model.encoder_blocks(), d = model.decoder_blocks();

  auto zeros_like_src = [](const ConvTape& ct) {
    return RandomTensor(Tensor(ct.geom.src_shape, 0.0),
                        Tensor(ct.geom.src_shape, 0.0));
  };

  // Softmax and final 1x1 convolution.
  const RandomTensor& logits = tape.logits;
  Tensor g_logit_mean(logits.mean.shape, 0.0);
  Tensor g_logit_var(logits.var.shape, 0.0);
  softmax_backward(tape.softmax, logits, g_prob, g_cov, g_logit_mean,
                   g_logit_var);

  const std::size_t fi = model.final_conv();
  RandomTensor g_cur = zeros_like_src(tape.conv[fi]);
  conv_backward(tape.conv[fi], model.layers[fi].kernels, g_logit_mean,
                g_logit_var, grads.d_mean[fi], grads.d_rho[fi], &g_cur,
                zero_variance);

  // Skip gradients collected during the decoder sweep, consumed by the
  // encoder sweep.
  std::vector<Tensor> g_skip_mean(e), g_skip_var(e);

  for (std::size_t jj = d; jj-- > 0;) {
    const DecoderPlan& plan = model.decoder_plan[jj];
    const std::size_t c2 = model.dec_conv(jj, 1);
    const std::size_t c1 = model.dec_conv(jj, 0);
    const std::size_t up = model.dec_upconv(jj);

    // relu2 -> conv2
    Tensor gm(g_cur.mean.shape, 0.0), gv(g_cur.var.shape, 0.0);
    relu_backward(tape.relu[c2], g_cur.mean, g_cur.var, gm, gv);
    RandomTensor g_padded = zeros_like_src(tape.conv[c2]);
    conv_backward(tape.conv[c2], model.layers[c2].kernels, gm, gv,
                  grads.d_mean[c2], grads.d_rho[c2], &g_padded, zero_variance);

    // pad w2 -> relu1 -> conv1
    const std::size_t pre_pad_h =
        g_padded.mean.dim(0) - 2 * static_cast<std::size_t>(plan.pad_before_conv2);
    Tensor gm1({pre_pad_h, pre_pad_h, g_padded.mean.dim(2)}, 0.0);
    Tensor gv1(gm1.shape, 0.0);
    pad_backward(plan.pad_before_conv2, g_padded.mean, g_padded.var, gm1, gv1);
    Tensor gm1r(gm1.shape, 0.0), gv1r(gm1.shape, 0.0);
    relu_backward(tape.relu[c1], gm1, gv1, gm1r, gv1r);
    RandomTensor g_concat = zeros_like_src(tape.conv[c1]);
    conv_backward(tape.conv[c1], model.layers[c1].kernels, gm1r, gv1r,
                  grads.d_mean[c1], grads.d_rho[c1], &g_concat, zero_variance);

    // concat -> (decoder branch, skip branch)
    const std::size_t dec_ch = model.layers[up].kernels.size();
    const std::size_t skip_ch = g_concat.mean.dim(2) - dec_ch;
    const std::size_t cs = plan.concat_size;
    Tensor gdm({cs, cs, dec_ch}, 0.0), gdv({cs, cs, dec_ch}, 0.0);
    Tensor gsm({cs, cs, skip_ch}, 0.0), gsv({cs, cs, skip_ch}, 0.0);
    concat_backward(dec_ch, g_concat.mean, g_concat.var, gdm, gdv, gsm, gsv);

    // Skip branch: undo the crop if one happened.
    const std::size_t skip_size = model.encoder_sizes[plan.skip_block];
    if (g_skip_mean[plan.skip_block].numel() == 0) {
      g_skip_mean[plan.skip_block] = Tensor({skip_size, skip_size, skip_ch}, 0.0);
      g_skip_var[plan.skip_block] = Tensor({skip_size, skip_size, skip_ch}, 0.0);
    }
    if (skip_size > cs) {
      crop_backward({skip_size, skip_size, skip_ch}, gsm, gsv,
                    g_skip_mean[plan.skip_block], g_skip_var[plan.skip_block]);
    } else {
      for (std::size_t i = 0; i < gsm.numel(); ++i) {
        g_skip_mean[plan.skip_block].data[i] += gsm.data[i];
        g_skip_var[plan.skip_block].data[i] += gsv.data[i];
      }
    }

    // Decoder branch: undo crop, pad w1, up-convolution, up-sample.
    const std::size_t padded_size =
        plan.upconv_out + 2 * static_cast<std::size_t>(plan.pad_before_concat);
    Tensor gpm({padded_size, padded_size, dec_ch}, 0.0);
    Tensor gpv({padded_size, padded_size, dec_ch}, 0.0);
    if (padded_size > cs) {
      crop_backward({padded_size, padded_size, dec_ch}, gdm, gdv, gpm, gpv);
    } else {
      gpm = gdm;
      gpv = gdv;
    }
    Tensor gum({plan.upconv_out, plan.upconv_out, dec_ch}, 0.0);
    Tensor guv({plan.upconv_out, plan.upconv_out, dec_ch}, 0.0);
    if (plan.pad_before_concat > 0) {
      pad_backward(plan.pad_before_concat, gpm, gpv, gum, guv);
    } else {
      gum = gpm;
      guv = gpv;
    }
    RandomTensor g_upsampled = zeros_like_src(tape.conv[up]);
    conv_backward(tape.conv[up], model.layers[up].kernels, gum, guv,
                  grads.d_mean[up], grads.d_rho[up], &g_upsampled,
                  zero_variance);
    const std::size_t in_size = g_upsampled.mean.dim(0) / 2;
    const std::size_t in_ch = g_upsampled.mean.dim(2);
    g_cur = RandomTensor(Tensor({in_size, in_size, in_ch}, 0.0),
                         Tensor({in_size, in_size, in_ch}, 0.0));
    upsample_backward(g_upsampled.mean, g_upsampled.var, g_cur.mean, g_cur.var);
  }

  for (std::size_t bb = e; bb-- > 0;) {
    Tensor gm, gv;
    if (bb + 1 < e) {
      const auto& pt = tape.pool[bb];
      gm = Tensor(pt.in_shape, 0.0);
      gv = Tensor(pt.in_shape, 0.0);
      maxpool_backward(pt, g_cur.mean, g_cur.var, gm, gv);
      // Skip connection contribution.
      for (std::size_t i = 0; i < gm.numel(); ++i) {
        gm.data[i] += g_skip_mean[bb].data[i];
        gv.data[i] += g_skip_var[bb].data[i];
      }
    } else {
      gm = g_cur.mean;
      gv = g_cur.var;
    }

    const std::size_t l2 = model.enc_conv(bb, 1);
    const std::size_t l1 = model.enc_conv(bb, 0);
    Tensor gm2(gm.shape, 0.0), gv2(gm.shape, 0.0);
    relu_backward(tape.relu[l2], gm, gv, gm2, gv2);
    RandomTensor g_mid = zeros_like_src(tape.conv[l2]);
    conv_backward(tape.conv[l2], model.layers[l2].kernels, gm2, gv2,
                  grads.d_mean[l2], grads.d_rho[l2], &g_mid, zero_variance);

    Tensor gm1(g_mid.mean.shape, 0.0), gv1(g_mid.mean.shape, 0.0);
    relu_backward(tape.relu[l1], g_mid.mean, g_mid.var, gm1, gv1);
    const bool first = (bb == 0);
    RandomTensor* g_in_ptr = nullptr;
    RandomTensor g_prev;
    if (!first) {
      g_prev = zeros_like_src(tape.conv[l1]);
      g_in_ptr = &g_prev;
    } else if (g_image != nullptr) {
      g_prev = zeros_like_src(tape.conv[l1]);
      g_in_ptr = &g_prev;
    }
    conv_backward(tape.conv[l1], model.layers[l1].kernels, gm1, gv1,
                  grads.d_mean[l1], grads.d_rho[l1], g_in_ptr, zero_variance,
                  /*image_gradient_mean_only=*/first);
    if (!first) {
      g_cur = g_prev;
    } else if (g_image != nullptr) {
      *g_image = g_prev.mean;
    }
  }
}

double model_kl(const VariationalModel& model, const PriorSpec& prior) {
  double total = 0.0;
  for (const auto& layer : model.layers) {
    for (const auto& k : layer.kernels) total += kernel_kl(k, prior);
  }
  return total;
}

void model_kl_grad(const VariationalModel& model, const PriorSpec& prior,
                   Gradients& grads, double scale) {
  const double vp = prior.prior_variance;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const auto& layer = model.layers[li];
    const std::size_t len = layer.kernels.front().length();
    for (std::size_t k = 0; k < layer.kernels.size(); ++k) {
      const auto& kr = layer.kernels[k];
      for (std::size_t l = 0; l < len; ++l) {
        const double s2 = softplus(kr.rho[l]);
        grads.d_mean[li][k * len + l] += scale * kr.mean[l] / vp;
        grads.d_rho[li][k * len + l] +=
            scale * 0.5 * (1.0 / vp - 1.0 / s2) * softplus_deriv(kr.rho[l]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("checkpoint: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64_vec(std::ostream& os, const std::vector<double>& v) {
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * 8));
}

void read_f64_vec(std::istream& is, std::vector<double>& v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * 8));
  if (!is) throw DataError("checkpoint: truncated kernel data");
}

}  // namespace

void save_checkpoint(const VariationalModel& model, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = 1;
  const NetworkConfig& c = model.cfg;
  header["config"] = {
      {"input_h", c.input_h},
      {"input_w", c.input_w},
      {"in_channels", c.in_channels},
      {"num_classes", c.num_classes},
      {"encoder_kernels", c.encoder_kernels},
      {"decoder_kernels", c.decoder_kernels},
      {"kernel_size", c.kernel_size},
      {"sigma_pa", c.sigma_pa},
      {"mode", c.mode == ModelMode::vmp ? "vmp" : "deterministic"},
  };
  const std::string js = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write("VMP1", 4);
  write_u32(os, static_cast<std::uint32_t>(js.size()));
  os.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& layer : model.layers) {
    for (const auto& k : layer.kernels) {
      write_f64_vec(os, k.mean);
      write_f64_vec(os, k.rho);
    }
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

VariationalModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VMP1", 4) != 0) {
    throw DataError("checkpoint: bad magic in " + path);
  }
  const std::uint32_t len = read_u32(is);
  std::string js(len, '\0');
  is.read(js.data(), len);
  if (!is) throw DataError("checkpoint: truncated JSON header");
  nlohmann::json header = nlohmann::json::parse(js);
  const auto& jc = header.at("config");
  NetworkConfig cfg;
  cfg.input_h = jc.at("input_h").get<std::size_t>();
  cfg.input_w = jc.at("input_w").get<std::size_t>();
  cfg.in_channels = jc.at("in_channels").get<std::size_t>();
  cfg.num_classes = jc.at("num_classes").get<std::size_t>();
  cfg.encoder_kernels = jc.at("encoder_kernels").get<std::vector<std::size_t>>();
  cfg.decoder_kernels = jc.at("decoder_kernels").get<std::vector<std::size_t>>();
  cfg.kernel_size = jc.at("kernel_size").get<int>();
  cfg.sigma_pa = jc.at("sigma_pa").get<double>();
  cfg.mode = jc.at("mode").get<std::string>() == "deterministic"
                 ? ModelMode::deterministic
                 : ModelMode::vmp;

  VariationalModel model = build(cfg, /*seed=*/0);
  for (auto& layer : model.layers) {
    for (auto& k : layer.kernels) {
      read_f64_vec(is, k.mean);
      read_f64_vec(is, k.rho);
    }
  }
  return model;
}

}  // namespace vmp
