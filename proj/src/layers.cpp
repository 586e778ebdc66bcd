#include "vmp/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace vmp {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using MapConstMat = Eigen::Map<const Mat>;

// Packs kernel means / variances / squared means into L x K matrices.
struct PackedKernels {
  Mat wm;    // means
  Mat wv;    // variances softplus(rho)
  Mat wm2;   // elementwise squared means
};

PackedKernels pack_kernels(const std::vector<VariationalKernel>& kernels,
                           bool zero_variance) {
  const std::size_t k_count = kernels.size();
  const std::size_t len = kernels.front().length();
  PackedKernels p;
  p.wm.resize(len, k_count);
  p.wv.resize(len, k_count);
  p.wm2.resize(len, k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const auto& kr = kernels[k];
    if (kr.length() != len) throw GeometryError("kernel lengths differ");
    for (std::size_t l = 0; l < len; ++l) {
      const double m = kr.mean[l];
      p.wm(l, k) = m;
      p.wm2(l, k) = m * m;
      p.wv(l, k) = zero_variance ? 0.0 : softplus(kr.rho[l]);
    }
  }
  return p;
}

}  // namespace

RandomTensor conv_moments(const RandomTensor& input,
                          const std::vector<VariationalKernel>& kernels,
                          int stride, int zero_pad, ConvTape* tape,
                          bool zero_variance) {
  if (kernels.empty()) throw GeometryError("conv_moments: no kernels");
  const auto& k0 = kernels.front();
  const std::size_t in_c = input.mean.dim(2);
  if (static_cast<std::size_t>(k0.in_channels) != in_c) {
    throw GeometryError("conv_moments: kernel channel mismatch");
  }
  const std::size_t len = static_cast<std::size_t>(k0.kh) * k0.kw * in_c;
  if (k0.length() != len) throw GeometryError("conv_moments: kernel length mismatch");
  for (double v : input.var.data) {
    if (v < 0.0) throw DataError("conv_moments: negative input variance");
  }

  ConvTape local;
  ConvTape& t = tape ? *tape : local;
  t.geom = extract_patches(input.mean, k0.kh, k0.kw, stride, zero_pad);
  bool det_input = true;
  for (double v : input.var.data) {
    if (v != 0.0) { det_input = false; break; }
  }
  t.input_deterministic = det_input;
  if (!det_input) {
    t.var_patches = gather_patches(t.geom, input.var, 0.0);
  }

  const std::size_t j = t.geom.rows;
  const std::size_t k_count = kernels.size();
  PackedKernels p = pack_kernels(kernels, zero_variance);

  MapConstMat m(t.geom.data.data.data(), j, len);
  RandomTensor out(Tensor({t.geom.out_h, t.geom.out_w, k_count}),
                   Tensor({t.geom.out_h, t.geom.out_w, k_count}));
  MapMat mean_out(out.mean.data.data(), j, k_count);
  MapMat var_out(out.var.data.data(), j, k_count);

  mean_out.noalias() = m * p.wm;
  if (zero_variance) {
    var_out.setZero();
  } else if (det_input) {
    var_out.noalias() = m.cwiseProduct(m) * p.wv;
  } else {
    MapConstMat s(t.var_patches.data.data(), j, len);
    var_out.noalias() = (s + m.cwiseProduct(m)) * p.wv + s * p.wm2;
  }
  return out;
}

void conv_backward(const ConvTape& tape,
                   const std::vector<VariationalKernel>& kernels,
                   const Tensor& g_mean_out, const Tensor& g_var_out,
                   std::vector<double>& d_kernel_mean,
                   std::vector<double>& d_kernel_rho, RandomTensor* g_input,
                   bool zero_variance, bool image_gradient_mean_only) {
  const std::size_t j = tape.geom.rows;
  const std::size_t len = tape.geom.cols;
  const std::size_t k_count = kernels.size();
  if (g_mean_out.numel() != j * k_count || g_var_out.numel() != j * k_count) {
    throw GeometryError("conv_backward: gradient shape mismatch");
  }
  if (d_kernel_mean.size() != k_count * len || d_kernel_rho.size() != k_count * len) {
    throw GeometryError("conv_backward: parameter gradient size mismatch");
  }

  PackedKernels p = pack_kernels(kernels, zero_variance);
  MapConstMat m(tape.geom.data.data.data(), j, len);
  MapConstMat gm(g_mean_out.data.data(), j, k_count);
  MapConstMat gv(g_var_out.data.data(), j, k_count);

  const bool det_input = tape.input_deterministic;
  Mat m2 = m.cwiseProduct(m);

  // Parameter gradients.
  Mat dwm = m.transpose() * gm;  // L x K
  Mat dwv;
  if (!zero_variance) {
    if (det_input) {
      dwv = m2.transpose() * gv;
    } else {
      MapConstMat s(tape.var_patches.data.data(), j, len);
      dwv = (Mat(s) + m2).transpose() * gv;
      dwm += 2.0 * p.wm.cwiseProduct(s.transpose() * gv);
    }
  }
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t l = 0; l < len; ++l) {
      d_kernel_mean[k * len + l] += dwm(l, k);
      if (!zero_variance) {
        d_kernel_rho[k * len + l] +=
            dwv(l, k) * softplus_deriv(kernels[k].rho[l]);
      }
    }
  }

  // Input gradients, scattered back through the shared index map.
  if (g_input != nullptr) {
    Mat gm_in = gm * p.wm.transpose();  // J x L
    if (!zero_variance && !image_gradient_mean_only) {
      gm_in += 2.0 * m.cwiseProduct(gv * p.wv.transpose());
    }
    Tensor gm_in_t({j, len});
    std::copy(gm_in.data(), gm_in.data() + j * len, gm_in_t.data.begin());
    scatter_add_patches(tape.geom, gm_in_t, g_input->mean);

    if (!zero_variance && !det_input && !image_gradient_mean_only) {
      Mat gs_in = gv * (p.wv + p.wm2).transpose();
      Tensor gs_in_t({j, len});
      std::copy(gs_in.data(), gs_in.data() + j * len, gs_in_t.data.begin());
      scatter_add_patches(tape.geom, gs_in_t, g_input->var);
    }
  }
}

RandomTensor conv_first(const PatchMatrix& x, const VariationalKernel& k) {
  if (x.cols != k.length()) {
    throw GeometryError("conv_first: patch width does not match kernel");
  }
  const std::vector<double> sigma2 = kernel_variance(k);
  RandomTensor out(Tensor({x.out_h, x.out_w, 1}), Tensor({x.out_h, x.out_w, 1}));
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double xv = x.at(r, c);
      mean += xv * k.mean[c];
      var += xv * xv * sigma2[c];
    }
    out.mean.data[r] = mean;
    out.var.data[r] = var;
  }
  return out;
}

RandomTensor conv_random(const PatchMatrix& geom, const RandomTensor& input,
                         const VariationalKernel& k) {
  if (geom.cols != k.length()) {
    throw GeometryError("conv_random: patch width does not match kernel");
  }
  for (double v : input.var.data) {
    if (v < 0.0) throw DataError("conv_random: negative input variance");
  }
  const Tensor s = gather_patches(geom, input.var, 0.0);
  const std::vector<double> sigma2 = kernel_variance(k);
  RandomTensor out(Tensor({geom.out_h, geom.out_w, 1}),
                   Tensor({geom.out_h, geom.out_w, 1}));
  for (std::size_t r = 0; r < geom.rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < geom.cols; ++c) {
      const double mu = geom.at(r, c);
      const double sb = s.data[r * geom.cols + c];
      mean += mu * k.mean[c];
      var += sb * sigma2[c] + mu * mu * sigma2[c] + k.mean[c] * k.mean[c] * sb;
    }
    out.mean.data[r] = mean;
    out.var.data[r] = var;
  }
  return out;
}

RandomTensor relu_moments(const RandomTensor& z, ReluTape* tape) {
  RandomTensor out(Tensor(z.mean.shape), Tensor(z.var.shape));
  if (tape) tape->mask.assign(z.mean.numel(), 0);
  for (std::size_t i = 0; i < z.mean.numel(); ++i) {
    const bool on = z.mean.data[i] > 0.0;
    out.mean.data[i] = on ? z.mean.data[i] : 0.0;
    out.var.data[i] = on ? z.var.data[i] : 0.0;
    if (tape && on) tape->mask[i] = 1;
  }
  return out;
}

void relu_backward(const ReluTape& tape, const Tensor& g_mean_out,
                   const Tensor& g_var_out, Tensor& g_mean_in,
                   Tensor& g_var_in) {
  for (std::size_t i = 0; i < tape.mask.size(); ++i) {
    if (tape.mask[i]) {
      g_mean_in.data[i] += g_mean_out.data[i];
      g_var_in.data[i] += g_var_out.data[i];
    }
  }
}

RandomTensor maxpool_moments(const RandomTensor& g, PoolTape* tape) {
  const std::size_t h = g.mean.dim(0), w = g.mean.dim(1), c = g.mean.dim(2);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  RandomTensor out(Tensor({oh, ow, c}), Tensor({oh, ow, c}));
  if (tape) {
    tape->argmax.assign(oh * ow * c, 0);
    tape->in_shape = g.mean.shape;
  }
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t y = oy * 2 + dy, x = ox * 2 + dx;
            if (y >= h || x >= w) continue;
            const std::size_t idx = (y * w + x) * c + ch;
            if (g.mean.data[idx] > best) {
              best = g.mean.data[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (oy * ow + ox) * c + ch;
        out.mean.data[o] = g.mean.data[best_idx];
        out.var.data[o] = g.var.data[best_idx];
        if (tape) tape->argmax[o] = best_idx;
      }
    }
  }
  return out;
}

void maxpool_backward(const PoolTape& tape, const Tensor& g_mean_out,
                      const Tensor& g_var_out, Tensor& g_mean_in,
                      Tensor& g_var_in) {
  for (std::size_t o = 0; o < tape.argmax.size(); ++o) {
    g_mean_in.data[tape.argmax[o]] += g_mean_out.data[o];
    g_var_in.data[tape.argmax[o]] += g_var_out.data[o];
  }
}

RandomTensor upsample_moments(const RandomTensor& g) {
  const std::size_t h = g.mean.dim(0), w = g.mean.dim(1), c = g.mean.dim(2);
  RandomTensor out(Tensor({2 * h, 2 * w, c}), Tensor({2 * h, 2 * w, c}));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        out.mean.at(2 * y, 2 * x, ch) = g.mean.at(y, x, ch);
        out.var.at(2 * y, 2 * x, ch) = g.var.at(y, x, ch);
      }
    }
  }
  return out;
}

void upsample_backward(const Tensor& g_mean_out, const Tensor& g_var_out,
                       Tensor& g_mean_in, Tensor& g_var_in) {
  const std::size_t h = g_mean_in.dim(0), w = g_mean_in.dim(1),
                    c = g_mean_in.dim(2);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        g_mean_in.at(y, x, ch) += g_mean_out.at(2 * y, 2 * x, ch);
        g_var_in.at(y, x, ch) += g_var_out.at(2 * y, 2 * x, ch);
      }
    }
  }
}

RandomTensor upconv_moments(const RandomTensor& g,
                            const std::vector<VariationalKernel>& kernels) {
  RandomTensor up = upsample_moments(g);
  return conv_moments(up, kernels, /*stride=*/1, /*zero_pad=*/0, nullptr);
}

RandomTensor pad_moments(const RandomTensor& g, int width, double sigma_pa) {
  if (sigma_pa <= 0.0) throw GeometryError("pad_moments: sigma_pa must be > 0");
  if (width < 0) throw GeometryError("pad_moments: negative width");
  if (width == 0) return g;
  const std::size_t h = g.mean.dim(0), w = g.mean.dim(1), c = g.mean.dim(2);
  const std::size_t nw = static_cast<std::size_t>(width);
  RandomTensor out(Tensor({h + 2 * nw, w + 2 * nw, c}, 0.0),
                   Tensor({h + 2 * nw, w + 2 * nw, c}, sigma_pa));
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

void pad_backward(int width, const Tensor& g_mean_out, const Tensor& g_var_out,
                  Tensor& g_mean_in, Tensor& g_var_in) {
  const std::size_t h = g_mean_in.dim(0), w = g_mean_in.dim(1),
                    c = g_mean_in.dim(2);
  const std::size_t nw = static_cast<std::size_t>(width);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        g_mean_in.at(y, x, ch) += g_mean_out.at(y + nw, x + nw, ch);
        g_var_in.at(y, x, ch) += g_var_out.at(y + nw, x + nw, ch);
      }
    }
  }
}

RandomTensor crop_to(const RandomTensor& g, std::size_t target_h,
                     std::size_t target_w) {
  const std::size_t h = g.mean.dim(0), w = g.mean.dim(1), c = g.mean.dim(2);
  if (target_h > h || target_w > w) {
    throw GeometryError("crop_to: target exceeds source");
  }
  const std::size_t oy = (h - target_h) / 2, ox = (w - target_w) / 2;
  RandomTensor out(Tensor({target_h, target_w, c}),
                   Tensor({target_h, target_w, c}));
  for (std::size_t y = 0; y < target_h; ++y) {
    for (std::size_t x = 0; x < target_w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        out.mean.at(y, x, ch) = g.mean.at(y + oy, x + ox, ch);
        out.var.at(y, x, ch) = g.var.at(y + oy, x + ox, ch);
      }
    }
  }
  return out;
}

void crop_backward(const std::vector<std::size_t>& src_shape,
                   const Tensor& g_mean_out, const Tensor& g_var_out,
                   Tensor& g_mean_in, Tensor& g_var_in) {
  const std::size_t th = g_mean_out.dim(0), tw = g_mean_out.dim(1),
                    c = g_mean_out.dim(2);
  const std::size_t oy = (src_shape[0] - th) / 2, ox = (src_shape[1] - tw) / 2;
  for (std::size_t y = 0; y < th; ++y) {
    for (std::size_t x = 0; x < tw; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        g_mean_in.at(y + oy, x + ox, ch) += g_mean_out.at(y, x, ch);
        g_var_in.at(y + oy, x + ox, ch) += g_var_out.at(y, x, ch);
      }
    }
  }
}

RandomTensor concat_moments(const RandomTensor& dec, const RandomTensor& enc) {
  if (dec.mean.dim(0) != enc.mean.dim(0) || dec.mean.dim(1) != enc.mean.dim(1)) {
    throw GeometryError("concat_moments: spatial shape mismatch");
  }
  const std::size_t h = dec.mean.dim(0), w = dec.mean.dim(1);
  const std::size_t c1 = dec.mean.dim(2), c2 = enc.mean.dim(2);
  RandomTensor out(Tensor({h, w, c1 + c2}), Tensor({h, w, c1 + c2}));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c1; ++ch) {
        out.mean.at(y, x, ch) = dec.mean.at(y, x, ch);
        out.var.at(y, x, ch) = dec.var.at(y, x, ch);
      }
      for (std::size_t ch = 0; ch < c2; ++ch) {
        out.mean.at(y, x, c1 + ch) = enc.mean.at(y, x, ch);
        out.var.at(y, x, c1 + ch) = enc.var.at(y, x, ch);
      }
    }
  }
  return out;
}

void concat_backward(std::size_t dec_channels, const Tensor& g_mean_out,
                     const Tensor& g_var_out, Tensor& g_mean_dec,
                     Tensor& g_var_dec, Tensor& g_mean_enc, Tensor& g_var_enc) {
  const std::size_t h = g_mean_out.dim(0), w = g_mean_out.dim(1),
                    c = g_mean_out.dim(2);
  const std::size_t c2 = c - dec_channels;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < dec_channels; ++ch) {
        g_mean_dec.at(y, x, ch) += g_mean_out.at(y, x, ch);
        g_var_dec.at(y, x, ch) += g_var_out.at(y, x, ch);
      }
      for (std::size_t ch = 0; ch < c2; ++ch) {
        g_mean_enc.at(y, x, ch) += g_mean_out.at(y, x, dec_channels + ch);
        g_var_enc.at(y, x, ch) += g_var_out.at(y, x, dec_channels + ch);
      }
    }
  }
}

SoftmaxMoments softmax_moments(const RandomTensor& logits) {
  const std::size_t h = logits.mean.dim(0), w = logits.mean.dim(1),
                    c = logits.mean.dim(2);
  if (c < 2) throw GeometryError("softmax_moments: need at least two classes");
  SoftmaxMoments out;
  out.prob_mean = Tensor({h, w, c});
  out.cov = Tensor({h, w, c, c});
  std::vector<double> y(c);
  for (std::size_t px = 0; px < h * w; ++px) {
    const double* mu = logits.mean.data.data() + px * c;
    const double* s = logits.var.data.data() + px * c;
    double mx = mu[0];
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, mu[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      y[i] = std::exp(mu[i] - mx);
      z += y[i];
    }
    for (std::size_t i = 0; i < c; ++i) y[i] /= z;
    double* pm = out.prob_mean.data.data() + px * c;
    double* cv = out.cov.data.data() + px * c * c;
    for (std::size_t i = 0; i < c; ++i) pm[i] = y[i];
    // cov[a][b] = sum_c J_ac s_c J_bc, J_ac = y_a (delta_ac - y_c)
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t b = a; b < c; ++b) {
        double acc = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          const double jak = y[a] * ((a == k ? 1.0 : 0.0) - y[k]);
          const double jbk = y[b] * ((b == k ? 1.0 : 0.0) - y[k]);
          acc += jak * s[k] * jbk;
        }
        cv[a * c + b] = acc;
        cv[b * c + a] = acc;
      }
    }
  }
  return out;
}

void softmax_backward(const SoftmaxMoments& out, const RandomTensor& logits,
                      const Tensor& g_prob, const Tensor& g_cov,
                      Tensor& g_logit_mean, Tensor& g_logit_var) {
  const std::size_t h = logits.mean.dim(0), w = logits.mean.dim(1),
                    c = logits.mean.dim(2);
  const bool has_cov_grad = g_cov.numel() == h * w * c * c;
  std::vector<double> jmat(c * c), q(c * c), gy(c);
  for (std::size_t px = 0; px < h * w; ++px) {
    const double* y = out.prob_mean.data.data() + px * c;
    const double* s = logits.var.data.data() + px * c;
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t k = 0; k < c; ++k) {
        jmat[a * c + k] = y[a] * ((a == k ? 1.0 : 0.0) - y[k]);
      }
    }
    for (std::size_t i = 0; i < c; ++i) gy[i] = g_prob.data[px * c + i];

    if (has_cov_grad) {
      const double* gc = g_cov.data.data() + px * c * c;
      // g wrt input variance: (J' Gsym J)_kk with Gsym the symmetrized
      // covariance gradient.
      for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (std::size_t a = 0; a < c; ++a) {
          for (std::size_t b = 0; b < c; ++b) {
            const double gsym = 0.5 * (gc[a * c + b] + gc[b * c + a]);
            acc += jmat[a * c + k] * gsym * jmat[b * c + k];
          }
        }
        g_logit_var.data[px * c + k] += acc;
      }
      // Q[a][k] = sum_b Gsym[a][b] J[b][k] s[k]
      for (std::size_t a = 0; a < c; ++a) {
        for (std::size_t k = 0; k < c; ++k) {
          double acc = 0.0;
          for (std::size_t b = 0; b < c; ++b) {
            const double gsym = 0.5 * (gc[a * c + b] + gc[b * c + a]);
            acc += gsym * jmat[b * c + k];
          }
          q[a * c + k] = acc * s[k];
        }
      }
      // dCov/dy contribution: gy2[d] = 2 (Q[d][d] - sum_k Q[d][k] y[k]
      //                                      - sum_a Q[a][d] y[a])
      for (std::size_t d = 0; d < c; ++d) {
        double t1 = q[d * c + d];
        double t2 = 0.0, t3 = 0.0;
        for (std::size_t k = 0; k < c; ++k) t2 += q[d * c + k] * y[k];
        for (std::size_t a = 0; a < c; ++a) t3 += q[a * c + d] * y[a];
        gy[d] += 2.0 * (t1 - t2 - t3);
      }
    }

    // Chain through y = softmax(mu): the Jacobian is symmetric.
    for (std::size_t i = 0; i < c; ++i) {
      double acc = 0.0;
      for (std::size_t d = 0; d < c; ++d) acc += jmat[d * c + i] * gy[d];
      g_logit_mean.data[px * c + i] += acc;
    }
  }
}

}  // namespace vmp
