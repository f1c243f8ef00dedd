#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace oracle {

Mat to_mat(const stanet::Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("to_mat needs a matrix");
  Mat m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = t[i];
  return m;
}

Vec to_vec(const stanet::Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

stanet::Tensor to_tensor(const Mat& m) { return stanet::Tensor({m.rows, m.cols}, m.v); }

Mat positions(const stanet::Tensor& f) {
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  Mat x(hw, c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t m = 0; m < hw; ++m) x.at(m, ch) = f[ch * hw + m];
  return x;
}

Vec unpositions(const Mat& x) {
  Vec f(x.rows * x.cols);
  for (std::size_t m = 0; m < x.rows; ++m)
    for (std::size_t ch = 0; ch < x.cols; ++ch) f[ch * x.rows + m] = x.at(m, ch);
  return f;
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw std::invalid_argument("oracle matmul shape");
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) acc += a.at(i, p) * b.at(p, j);
      c.at(i, j) = acc;
    }
  return c;
}

Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Mat softmax_rows(const Mat& x) {
  Mat y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double peak = x.at(i, 0);
    for (std::size_t j = 1; j < x.cols; ++j) peak = std::max(peak, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) z += std::exp(x.at(i, j) - peak);
    for (std::size_t j = 0; j < x.cols; ++j) y.at(i, j) = std::exp(x.at(i, j) - peak) / z;
  }
  return y;
}

Vec patch_cosine(const Mat& q, const Mat& a) {
  Vec out(q.rows);
  for (std::size_t m = 0; m < q.rows; ++m) {
    double d = 0.0, nq = 0.0, na = 0.0;
    for (std::size_t j = 0; j < q.cols; ++j) {
      d += q.at(m, j) * a.at(m, j);
      nq += q.at(m, j) * q.at(m, j);
      na += a.at(m, j) * a.at(m, j);
    }
    out[m] = d / std::max(std::sqrt(nq) * std::sqrt(na), 1e-12);
  }
  return out;
}

Vec broadcast_mul_spatial(const Vec& f, std::size_t c, const Vec& s) {
  const std::size_t hw = f.size() / c;
  Vec out(f.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t m = 0; m < hw; ++m) out[ch * hw + m] = f[ch * hw + m] * s[m];
  return out;
}

Vec broadcast_mul_channel(const Vec& f, std::size_t c, const Vec& v) {
  const std::size_t hw = f.size() / c;
  Vec out(f.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t m = 0; m < hw; ++m) out[ch * hw + m] = f[ch * hw + m] * v[ch];
  return out;
}

double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double cosine(const Vec& a, const Vec& b) {
  return dot(a, b) / std::max(std::sqrt(dot(a, a)) * std::sqrt(dot(b, b)), 1e-12);
}

Vec gap(const Vec& f, std::size_t c) {
  const std::size_t hw = f.size() / c;
  Vec out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t m = 0; m < hw; ++m) out[ch] += f[ch * hw + m];
    out[ch] /= static_cast<double>(hw);
  }
  return out;
}

Layer layer_from(const stanet::attention::SpatialFormerParams& p) {
  Layer l;
  if (p.w_q.defined()) l.wq = to_mat(p.w_q);
  if (p.w_k.defined()) l.wk = to_mat(p.w_k);
  if (p.w_v.defined()) l.wv = to_mat(p.w_v);
  l.w1 = to_mat(p.ffn_w1);
  l.w2 = to_mat(p.ffn_w2);
  l.b1 = to_vec(p.ffn_b1);
  l.b2 = to_vec(p.ffn_b2);
  l.mlp = p.options.ffn == stanet::attention::FfnMode::kMlp;
  l.logit_scale = p.options.logit_scale;
  if (p.options.normalization != stanet::attention::Normalization::kNone)
    throw std::invalid_argument("oracle layer has no normalisation");
  return l;
}

Mat project(const Mat& x, const Mat& w) {
  if (w.v.empty()) return x;
  Mat y(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t o = 0; o < w.rows; ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < x.cols; ++j) acc += x.at(i, j) * w.at(o, j);
      y.at(i, o) = acc;
    }
  return y;
}

Mat attention_core(const Mat& q, const Mat& k, const Mat& v, bool logit_scale) {
  const double s = logit_scale ? 1.0 / std::sqrt(static_cast<double>(q.cols)) : 1.0;
  Mat out(q.rows, v.cols);
  for (std::size_t i = 0; i < q.rows; ++i) {
    Vec logit(k.rows);
    for (std::size_t j = 0; j < k.rows; ++j) {
      double d = 0.0;
      for (std::size_t ch = 0; ch < q.cols; ++ch) d += q.at(i, ch) * k.at(j, ch);
      logit[j] = d * s;
    }
    const double peak = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double& l : logit) z += (l = std::exp(l - peak));
    for (std::size_t j = 0; j < k.rows; ++j)
      for (std::size_t ch = 0; ch < v.cols; ++ch) out.at(i, ch) += logit[j] / z * v.at(j, ch);
  }
  return out;
}

Mat spatial_attention(const Mat& q, const Mat& a) {
  const Vec cos = patch_cosine(q, a);
  Mat out = q;
  for (std::size_t m = 0; m < q.rows; ++m)
    for (std::size_t ch = 0; ch < q.cols; ++ch) out.at(m, ch) = q.at(m, ch) + q.at(m, ch) * cos[m];
  return out;
}

Mat ffn(const Mat& x, const Layer& l) {
  if (!l.mlp) return x;
  Mat h = project(x, l.w1);
  for (std::size_t i = 0; i < h.rows; ++i)
    for (std::size_t j = 0; j < h.cols; ++j) h.at(i, j) = std::max(0.0, h.at(i, j) + l.b1[j]);
  Mat y = project(h, l.w2);
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t j = 0; j < y.cols; ++j) y.at(i, j) += l.b2[j];
  return y;
}

namespace {
Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}
}  // namespace

Mat cross_attention(const Mat& xq, const Mat& xs, const Layer& l) {
  Mat a = attention_core(project(xq, l.wq), project(xs, l.wk), project(xs, l.wv), l.logit_scale);
  return ffn(plus(xq, a), l);
}

Mat spatialformer(const Mat& x, const Mat& ref_rows, const Layer& l) {
  Mat q = project(x, l.wq);
  Mat a = attention_core(q, project(ref_rows, l.wk), project(ref_rows, l.wv), l.logit_scale);
  return ffn(plus(x, spatial_attention(q, a)), l);
}

Mat align_prototype(const Mat& xq, const std::vector<Mat>& supports, const Layer& l) {
  Mat q = project(xq, l.wq);
  Mat out(xq.rows, xq.cols);
  for (const Mat& s : supports) out = plus(out, attention_core(q, project(s, l.wk), project(s, l.wv), l.logit_scale));
  return out;
}

double max_abs_diff(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("oracle max_abs_diff size");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

double max_abs_diff(const stanet::Tensor& a, const Vec& b) { return max_abs_diff(to_vec(a), b); }

}  // namespace oracle
