#include "xct/tensor.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xct::diff {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ConfigError("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
int64_t Tensor::size() const { return static_cast<int64_t>(tape_->node(id_).value.size()); }
const std::vector<double>& Tensor::value() const { return tape_->node(id_).value; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }
bool Tensor::has_grad() const {
  const auto& n = tape_->node(id_);
  return n.is_leaf && n.requires_grad && !n.acc_grad.empty();
}
const std::vector<double>& Tensor::grad() const {
  const auto& n = tape_->node(id_);
  if (!n.is_leaf || !n.requires_grad) {
    throw ConfigError("tensor holds no gradient (frozen leaf or interior node)");
  }
  if (n.acc_grad.empty()) throw ConfigError("gradient not populated; call backward() first");
  return n.acc_grad;
}
double Tensor::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
  return v[0];
}

void Tape::check_same_shape(const Tensor& a, const Tensor& b, const char* op) const {
  if (node(a.id_).shape != node(b.id_).shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(node(a.id_).shape) +
                     " vs " + shape_str(node(b.id_).shape));
  }
}

void Tape::check_finite(const Node& n, const char* op) const {
  if (!check_finite_) return;
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in result");
    }
  }
}

int Tape::push(Node n, const char* op) {
  check_finite(n, op);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("leaf: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  return handle(push(std::move(n), "leaf"));
}

Tensor Tape::constant(const Shape& shape, double fill) {
  return leaf(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), fill), false);
}

namespace {
// elementwise node builder
struct Elem {
  Shape shape;
  std::vector<double> value;
  bool rg = false;
};
}  // namespace

Tensor Tape::add(Tensor a, Tensor b) {
  check_same_shape(a, b, "add");
  const auto& av = node(a.id_).value;
  const auto& bv = node(b.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + bv[i];
  n.requires_grad = node(a.id_).requires_grad || node(b.id_).requires_grad;
  int ai = a.id_, bi = b.id_;
  n.backprop = [ai, bi](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.node(bi).grad;
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  };
  return handle(push(std::move(n), "add"));
}

Tensor Tape::sub(Tensor a, Tensor b) {
  check_same_shape(a, b, "sub");
  const auto& av = node(a.id_).value;
  const auto& bv = node(b.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] - bv[i];
  n.requires_grad = node(a.id_).requires_grad || node(b.id_).requires_grad;
  int ai = a.id_, bi = b.id_;
  n.backprop = [ai, bi](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.node(bi).grad;
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  };
  return handle(push(std::move(n), "sub"));
}

Tensor Tape::mul(Tensor a, Tensor b) {
  check_same_shape(a, b, "mul");
  const auto& av = node(a.id_).value;
  const auto& bv = node(b.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] * bv[i];
  n.requires_grad = node(a.id_).requires_grad || node(b.id_).requires_grad;
  int ai = a.id_, bi = b.id_;
  n.backprop = [ai, bi](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    const auto& av2 = t.node(ai).value;
    const auto& bv2 = t.node(bi).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.node(bi).grad;
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  };
  return handle(push(std::move(n), "mul"));
}

Tensor Tape::div(Tensor a, Tensor b) {
  check_same_shape(a, b, "div");
  const auto& av = node(a.id_).value;
  const auto& bv = node(b.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] / bv[i];
  n.requires_grad = node(a.id_).requires_grad || node(b.id_).requires_grad;
  int ai = a.id_, bi = b.id_;
  n.backprop = [ai, bi](Tape& t) {
    int yi = t.cur_;
    auto& g = t.node(yi).grad;
    const auto& yv = t.node(yi).value;
    const auto& bv2 = t.node(bi).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[i];
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.node(bi).grad;
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * yv[i] / bv2[i];
    }
  };
  return handle(push(std::move(n), "div"));
}

Tensor Tape::scale(Tensor a, double c) {
  const auto& av = node(a.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = c * av[i];
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai, c](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    }
  };
  return handle(push(std::move(n), "scale"));
}

Tensor Tape::add_const(Tensor a, double c) {
  const auto& av = node(a.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + c;
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  };
  return handle(push(std::move(n), "add_const"));
}

Tensor Tape::log(Tensor a) {
  const auto& av = node(a.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = std::log(av[i]);
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    const auto& av2 = t.node(ai).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av2[i];
    }
  };
  return handle(push(std::move(n), "log"));
}

Tensor Tape::relu(Tensor a) {
  const auto& av = node(a.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] > 0.0 ? av[i] : 0.0;
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    const auto& av2 = t.node(ai).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += av2[i] > 0.0 ? g[i] : 0.0;
    }
  };
  return handle(push(std::move(n), "relu"));
}

Tensor Tape::sigmoid(Tensor a) {
  const auto& av = node(a.id_).value;
  Node n;
  n.shape = node(a.id_).shape;
  n.value.resize(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    double x = av[i];
    n.value[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai](Tape& t) {
    int yi = t.cur_;
    auto& g = t.node(yi).grad;
    const auto& yv = t.node(yi).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
    }
  };
  return handle(push(std::move(n), "sigmoid"));
}

Tensor Tape::softmax(Tensor a, int axis) {
  const auto& as = node(a.id_).shape;
  const int rank = static_cast<int>(as.size());
  if (axis < 0 || axis >= rank) {
    throw ConfigError("softmax: axis " + std::to_string(axis) + " out of range for " +
                      shape_str(as));
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= as[i];
  for (int i = axis + 1; i < rank; ++i) inner *= as[i];
  const int64_t m = as[axis];
  const auto& av = node(a.id_).value;
  Node n;
  n.shape = as;
  n.value.resize(av.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * m * inner + in;
      double mx = av[base];
      for (int64_t j = 1; j < m; ++j) mx = std::max(mx, av[base + j * inner]);
      double sum = 0.0;
      for (int64_t j = 0; j < m; ++j) {
        double e = std::exp(av[base + j * inner] - mx);
        n.value[base + j * inner] = e;
        sum += e;
      }
      for (int64_t j = 0; j < m; ++j) n.value[base + j * inner] /= sum;
    }
  }
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai, outer, inner, m](Tape& t) {
    int yi = t.cur_;
    if (!t.node(ai).requires_grad) return;
    auto& g = t.node(yi).grad;
    const auto& yv = t.node(yi).value;
    auto& ga = t.node(ai).grad;
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * m * inner + in;
        double dot = 0.0;
        for (int64_t j = 0; j < m; ++j) dot += g[base + j * inner] * yv[base + j * inner];
        for (int64_t j = 0; j < m; ++j) {
          ga[base + j * inner] += yv[base + j * inner] * (g[base + j * inner] - dot);
        }
      }
    }
  };
  return handle(push(std::move(n), "softmax"));
}

Tensor Tape::matmul(Tensor a, Tensor b) {
  const auto& as = node(a.id_).shape;
  const auto& bs = node(b.id_).shape;
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " vs " + shape_str(bs));
  }
  const int m = as[0], k = as[1], p = bs[1];
  const auto& av = node(a.id_).value;
  const auto& bv = node(b.id_).value;
  Node n;
  n.shape = {m, p};
  n.value.assign(static_cast<size_t>(m) * p, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double aik = av[static_cast<size_t>(i) * k + kk];
      const double* brow = &bv[static_cast<size_t>(kk) * p];
      double* orow = &n.value[static_cast<size_t>(i) * p];
      for (int j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
  n.requires_grad = node(a.id_).requires_grad || node(b.id_).requires_grad;
  int ai = a.id_, bi = b.id_;
  n.backprop = [ai, bi, m, k, p](Tape& t) {
    auto& g = t.node(t.cur_).grad;
    const auto& av2 = t.node(ai).value;
    const auto& bv2 = t.node(bi).value;
    if (t.node(ai).requires_grad) {
      auto& ga = t.node(ai).grad;  // g [m,p] * b^T [p,k]
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < p; ++j) {
          const double gij = g[static_cast<size_t>(i) * p + j];
          const double* brow = &bv2[0] + j;  // b[kk][j] strided
          double* garow = &ga[static_cast<size_t>(i) * k];
          for (int kk = 0; kk < k; ++kk) garow[kk] += gij * brow[static_cast<size_t>(kk) * p];
        }
      }
    }
    if (t.node(bi).requires_grad) {
      auto& gb = t.node(bi).grad;  // a^T [k,m] * g [m,p]
      for (int kk = 0; kk < k; ++kk) {
        for (int i = 0; i < m; ++i) {
          const double aik = av2[static_cast<size_t>(i) * k + kk];
          const double* grow = &g[static_cast<size_t>(i) * p];
          double* gbrow = &gb[static_cast<size_t>(kk) * p];
          for (int j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  };
  return handle(push(std::move(n), "matmul"));
}

namespace {

// copy one sample's channels into a zero-padded buffer
void pad_sample(const double* x, int C, int H, int W, int p, std::vector<double>& xp) {
  const int Hp = H + 2 * p, Wp = W + 2 * p;
  std::fill(xp.begin(), xp.end(), 0.0);
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < H; ++y) {
      std::copy(x + (static_cast<size_t>(c) * H + y) * W,
                x + (static_cast<size_t>(c) * H + y) * W + W,
                xp.begin() + (static_cast<size_t>(c) * Hp + y + p) * Wp + p);
    }
  }
}

}  // namespace

Tensor Tape::conv2d(Tensor x, Tensor w, int stride, int padding) {
  return conv2d(x, w, Tensor(), stride, padding);
}

Tensor Tape::conv2d(Tensor x, Tensor w, Tensor bias, int stride, int padding) {
  const auto& xs = node(x.id_).shape;
  const auto& ws = node(w.id_).shape;
  if (xs.size() != 4 || ws.size() != 4) {
    throw ShapeError("conv2d: need x [N,C,H,W] and w [O,C,kh,kw], got " + shape_str(xs) +
                     " and " + shape_str(ws));
  }
  if (xs[1] != ws[1]) {
    throw ShapeError("conv2d: channel mismatch " + shape_str(xs) + " vs " + shape_str(ws));
  }
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int O = ws[0], kh = ws[2], kw = ws[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel must be odd-sized");
  if (stride < 1 || padding < 0) throw ConfigError("conv2d: bad stride/padding");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
  const bool has_bias = bias.valid();
  if (has_bias) {
    const auto& bs = node(bias.id_).shape;
    if (bs.size() != 1 || bs[0] != O) {
      throw ShapeError("conv2d: bias shape " + shape_str(bs) + " vs out channels [" +
                       std::to_string(O) + "]");
    }
  }

  const auto& xv = node(x.id_).value;
  const auto& wv = node(w.id_).value;
  const int Hp = H + 2 * padding, Wp = W + 2 * padding;

  Node n;
  n.shape = {N, O, Ho, Wo};
  n.value.assign(static_cast<size_t>(N) * O * Ho * Wo, 0.0);

#ifdef _OPENMP
#pragma omp parallel
#endif
  {
    std::vector<double> xp(static_cast<size_t>(C) * Hp * Wp);
    int last_n = -1;
#ifdef _OPENMP
#pragma omp for collapse(2) schedule(static)
#endif
    for (int ni = 0; ni < N; ++ni) {
      for (int oc = 0; oc < O; ++oc) {
        if (ni != last_n) {
          pad_sample(&xv[static_cast<size_t>(ni) * C * H * W], C, H, W, padding, xp);
          last_n = ni;
        }
        const double b0 = has_bias ? node(bias.id_).value[oc] : 0.0;
        double* out = &n.value[(static_cast<size_t>(ni) * O + oc) * Ho * Wo];
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            double acc = b0;
            for (int ic = 0; ic < C; ++ic) {
              const double* wrow = &wv[((static_cast<size_t>(oc) * C + ic) * kh) * kw];
              const double* xrow =
                  &xp[(static_cast<size_t>(ic) * Hp + oy * stride) * Wp + ox * stride];
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) acc += xrow[kx] * wrow[kx];
                wrow += kw;
                xrow += Wp;
              }
            }
            out[static_cast<size_t>(oy) * Wo + ox] = acc;
          }
        }
      }
    }
  }

  n.requires_grad = node(x.id_).requires_grad || node(w.id_).requires_grad ||
                    (has_bias && node(bias.id_).requires_grad);
  int xi = x.id_, wi = w.id_, bi = has_bias ? bias.id_ : -1;
  n.backprop = [xi, wi, bi, N, C, H, W, O, kh, kw, stride, padding, Ho, Wo](Tape& t) {
    const auto& g = t.node(t.cur_).grad;
    const auto& xv2 = t.node(xi).value;
    const auto& wv2 = t.node(wi).value;
    const int Hp2 = H + 2 * padding, Wp2 = W + 2 * padding;

    if (bi >= 0 && t.node(bi).requires_grad) {
      auto& gb = t.node(bi).grad;
      for (int ni = 0; ni < N; ++ni) {
        for (int oc = 0; oc < O; ++oc) {
          const double* grow = &g[(static_cast<size_t>(ni) * O + oc) * Ho * Wo];
          double s = 0.0;
          for (int i = 0; i < Ho * Wo; ++i) s += grow[i];
          gb[oc] += s;
        }
      }
    }

    if (t.node(wi).requires_grad) {
      auto& gw = t.node(wi).grad;
#ifdef _OPENMP
#pragma omp parallel
#endif
      {
        std::vector<double> xp(static_cast<size_t>(C) * Hp2 * Wp2);
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
        for (int oc = 0; oc < O; ++oc) {
          for (int ni = 0; ni < N; ++ni) {
            pad_sample(&xv2[static_cast<size_t>(ni) * C * H * W], C, H, W, padding, xp);
            const double* grow = &g[(static_cast<size_t>(ni) * O + oc) * Ho * Wo];
            for (int oy = 0; oy < Ho; ++oy) {
              for (int ox = 0; ox < Wo; ++ox) {
                const double gv = grow[static_cast<size_t>(oy) * Wo + ox];
                if (gv == 0.0) continue;
                for (int ic = 0; ic < C; ++ic) {
                  double* wrow = &gw[((static_cast<size_t>(oc) * C + ic) * kh) * kw];
                  const double* xrow =
                      &xp[(static_cast<size_t>(ic) * Hp2 + oy * stride) * Wp2 + ox * stride];
                  for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) wrow[kx] += gv * xrow[kx];
                    wrow += kw;
                    xrow += Wp2;
                  }
                }
              }
            }
          }
        }
      }
    }

    if (t.node(xi).requires_grad) {
      auto& gx = t.node(xi).grad;
#ifdef _OPENMP
#pragma omp parallel
#endif
      {
        std::vector<double> gxp(static_cast<size_t>(C) * Hp2 * Wp2);
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
        for (int ni = 0; ni < N; ++ni) {
          std::fill(gxp.begin(), gxp.end(), 0.0);
          for (int oc = 0; oc < O; ++oc) {
            const double* grow = &g[(static_cast<size_t>(ni) * O + oc) * Ho * Wo];
            for (int oy = 0; oy < Ho; ++oy) {
              for (int ox = 0; ox < Wo; ++ox) {
                const double gv = grow[static_cast<size_t>(oy) * Wo + ox];
                if (gv == 0.0) continue;
                for (int ic = 0; ic < C; ++ic) {
                  const double* wrow = &wv2[((static_cast<size_t>(oc) * C + ic) * kh) * kw];
                  double* xrow =
                      &gxp[(static_cast<size_t>(ic) * Hp2 + oy * stride) * Wp2 + ox * stride];
                  for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) xrow[kx] += gv * wrow[kx];
                    wrow += kw;
                    xrow += Wp2;
                  }
                }
              }
            }
          }
          // crop padded gradient back onto the input
          for (int ic = 0; ic < C; ++ic) {
            for (int y = 0; y < H; ++y) {
              const double* src = &gxp[(static_cast<size_t>(ic) * Hp2 + y + padding) * Wp2 + padding];
              double* dst = &gx[((static_cast<size_t>(ni) * C + ic) * H + y) * W];
              for (int xx = 0; xx < W; ++xx) dst[xx] += src[xx];
            }
          }
        }
      }
    }
  };
  return handle(push(std::move(n), "conv2d"));
}

Tensor Tape::avg_pool2d(Tensor x, int kernel, int stride) {
  const auto& xs = node(x.id_).shape;
  if (xs.size() != 4) throw ShapeError("avg_pool2d: need [N,C,H,W], got " + shape_str(xs));
  if (kernel < 1 || stride < 1) throw ConfigError("avg_pool2d: bad kernel/stride");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H < kernel || W < kernel) {
    throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) + " exceeds input " +
                     shape_str(xs));
  }
  const int Ho = (H - kernel) / stride + 1;
  const int Wo = (W - kernel) / stride + 1;
  const auto& xv = node(x.id_).value;
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);

  Node n;
  n.shape = {N, C, Ho, Wo};
  n.value.assign(static_cast<size_t>(N) * C * Ho * Wo, 0.0);
  for (int nc = 0; nc < N * C; ++nc) {
    const double* in = &xv[static_cast<size_t>(nc) * H * W];
    double* out = &n.value[static_cast<size_t>(nc) * Ho * Wo];
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        for (int ky = 0; ky < kernel; ++ky) {
          const double* row = in + (static_cast<size_t>(oy * stride + ky)) * W + ox * stride;
          for (int kx = 0; kx < kernel; ++kx) acc += row[kx];
        }
        out[static_cast<size_t>(oy) * Wo + ox] = acc * inv;
      }
    }
  }
  n.requires_grad = node(x.id_).requires_grad;
  int xi = x.id_;
  n.backprop = [xi, N, C, H, W, Ho, Wo, kernel, stride, inv](Tape& t) {
    if (!t.node(xi).requires_grad) return;
    const auto& g = t.node(t.cur_).grad;
    auto& gx = t.node(xi).grad;
    for (int nc = 0; nc < N * C; ++nc) {
      const double* grow = &g[static_cast<size_t>(nc) * Ho * Wo];
      double* gxrow = &gx[static_cast<size_t>(nc) * H * W];
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          const double gv = grow[static_cast<size_t>(oy) * Wo + ox] * inv;
          for (int ky = 0; ky < kernel; ++ky) {
            double* row = gxrow + (static_cast<size_t>(oy * stride + ky)) * W + ox * stride;
            for (int kx = 0; kx < kernel; ++kx) row[kx] += gv;
          }
        }
      }
    }
  };
  return handle(push(std::move(n), "avg_pool2d"));
}

Tensor Tape::upsample_nearest(Tensor x, int factor) {
  const auto& xs = node(x.id_).shape;
  if (xs.size() != 4) throw ShapeError("upsample_nearest: need [N,C,H,W], got " + shape_str(xs));
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int Ho = H * factor, Wo = W * factor;
  const auto& xv = node(x.id_).value;

  Node n;
  n.shape = {N, C, Ho, Wo};
  n.value.resize(static_cast<size_t>(N) * C * Ho * Wo);
  for (int nc = 0; nc < N * C; ++nc) {
    const double* in = &xv[static_cast<size_t>(nc) * H * W];
    double* out = &n.value[static_cast<size_t>(nc) * Ho * Wo];
    for (int oy = 0; oy < Ho; ++oy) {
      const double* irow = in + (static_cast<size_t>(oy / factor)) * W;
      double* orow = out + static_cast<size_t>(oy) * Wo;
      for (int ox = 0; ox < Wo; ++ox) orow[ox] = irow[ox / factor];
    }
  }
  n.requires_grad = node(x.id_).requires_grad;
  int xi = x.id_;
  n.backprop = [xi, N, C, H, W, Ho, Wo, factor](Tape& t) {
    if (!t.node(xi).requires_grad) return;
    const auto& g = t.node(t.cur_).grad;
    auto& gx = t.node(xi).grad;
    for (int nc = 0; nc < N * C; ++nc) {
      const double* grow = &g[static_cast<size_t>(nc) * Ho * Wo];
      double* gxrow = &gx[static_cast<size_t>(nc) * H * W];
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          gxrow[(static_cast<size_t>(oy / factor)) * W + ox / factor] +=
              grow[static_cast<size_t>(oy) * Wo + ox];
        }
      }
    }
  };
  return handle(push(std::move(n), "upsample_nearest"));
}

Tensor Tape::concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ConfigError("concat: no inputs");
  const auto& s0 = node(xs[0].id_).shape;
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) throw ConfigError("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    const auto& s = node(x.id_).shape;
    if (static_cast<int>(s.size()) != rank) {
      throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    }
    for (int i = 0; i < rank; ++i) {
      if (i != axis && s[i] != s0[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < rank; ++i) inner *= s0[i];

  Node n;
  n.shape = out_shape;
  n.value.resize(static_cast<size_t>(shape_numel(out_shape)));
  n.requires_grad = false;
  std::vector<int> ids;
  std::vector<int64_t> widths;  // axis extent * inner, per input
  for (const auto& x : xs) {
    ids.push_back(x.id_);
    widths.push_back(static_cast<int64_t>(node(x.id_).shape[axis]) * inner);
    n.requires_grad = n.requires_grad || node(x.id_).requires_grad;
  }
  const int64_t out_width = static_cast<int64_t>(out_shape[axis]) * inner;
  for (int64_t o = 0; o < outer; ++o) {
    int64_t off = 0;
    for (size_t t = 0; t < ids.size(); ++t) {
      const auto& v = node(ids[t]).value;
      std::copy(v.begin() + o * widths[t], v.begin() + (o + 1) * widths[t],
                n.value.begin() + o * out_width + off);
      off += widths[t];
    }
  }
  n.backprop = [ids, widths, outer, out_width](Tape& t) {
    const auto& g = t.node(t.cur_).grad;
    for (int64_t o = 0; o < outer; ++o) {
      int64_t off = 0;
      for (size_t i = 0; i < ids.size(); ++i) {
        if (t.node(ids[i]).requires_grad) {
          auto& gi = t.node(ids[i]).grad;
          for (int64_t j = 0; j < widths[i]; ++j) {
            gi[o * widths[i] + j] += g[o * out_width + off + j];
          }
        }
        off += widths[i];
      }
    }
  };
  return handle(push(std::move(n), "concat"));
}

Tensor Tape::reduce_sum(Tensor a) {
  const auto& av = node(a.id_).value;
  double s = 0.0;
  for (double v : av) s += v;
  Node n;
  n.shape = {1};
  n.value = {s};
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai](Tape& t) {
    if (!t.node(ai).requires_grad) return;
    const double g = t.node(t.cur_).grad[0];
    auto& ga = t.node(ai).grad;
    for (auto& v : ga) v += g;
  };
  return handle(push(std::move(n), "reduce_sum"));
}

Tensor Tape::reduce_mean(Tensor a) {
  const auto& av = node(a.id_).value;
  double s = 0.0;
  for (double v : av) s += v;
  const double inv = 1.0 / static_cast<double>(av.size());
  Node n;
  n.shape = {1};
  n.value = {s * inv};
  n.requires_grad = node(a.id_).requires_grad;
  int ai = a.id_;
  n.backprop = [ai, inv](Tape& t) {
    if (!t.node(ai).requires_grad) return;
    const double g = t.node(t.cur_).grad[0] * inv;
    auto& ga = t.node(ai).grad;
    for (auto& v : ga) v += g;
  };
  return handle(push(std::move(n), "reduce_mean"));
}

Tensor Tape::depthwise_conv2d(Tensor x, Tensor w, Tensor bias, int stride, int padding) {
  const auto& xs = node(x.id_).shape;
  const auto& ws = node(w.id_).shape;
  if (xs.size() != 4 || ws.size() != 3 || ws[0] != xs[1]) {
    throw ShapeError("depthwise_conv2d: need x [N,C,H,W] and w [C,kh,kw], got " + shape_str(xs) +
                     " and " + shape_str(ws));
  }
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int kh = ws[1], kw = ws[2];
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("depthwise_conv2d: kernel must be odd-sized");
  if (stride < 1 || padding < 0) throw ConfigError("depthwise_conv2d: bad stride/padding");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("depthwise_conv2d: kernel larger than padded input");
  const bool has_bias = bias.valid();
  if (has_bias && (node(bias.id_).shape.size() != 1 || node(bias.id_).shape[0] != C)) {
    throw ShapeError("depthwise_conv2d: bias shape mismatch");
  }
  const auto& xv = node(x.id_).value;
  const auto& wv = node(w.id_).value;
  const int Hp = H + 2 * padding, Wp = W + 2 * padding;

  Node n;
  n.shape = {N, C, Ho, Wo};
  n.value.assign(static_cast<size_t>(N) * C * Ho * Wo, 0.0);
  std::vector<double> xp(static_cast<size_t>(Hp) * Wp);
  for (int ni = 0; ni < N; ++ni) {
    for (int c = 0; c < C; ++c) {
      pad_sample(&xv[(static_cast<size_t>(ni) * C + c) * H * W], 1, H, W, padding, xp);
      const double b0 = has_bias ? node(bias.id_).value[c] : 0.0;
      double* out = &n.value[(static_cast<size_t>(ni) * C + c) * Ho * Wo];
      const double* wbase = &wv[static_cast<size_t>(c) * kh * kw];
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = b0;
          const double* xrow = &xp[static_cast<size_t>(oy * stride) * Wp + ox * stride];
          const double* wrow = wbase;
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) acc += xrow[kx] * wrow[kx];
            wrow += kw;
            xrow += Wp;
          }
          out[static_cast<size_t>(oy) * Wo + ox] = acc;
        }
      }
    }
  }
  n.requires_grad = node(x.id_).requires_grad || node(w.id_).requires_grad ||
                    (has_bias && node(bias.id_).requires_grad);
  int xi = x.id_, wi = w.id_, bi = has_bias ? bias.id_ : -1;
  n.backprop = [xi, wi, bi, N, C, H, W, kh, kw, stride, padding, Ho, Wo](Tape& t) {
    const auto& g = t.node(t.cur_).grad;
    const auto& xv2 = t.node(xi).value;
    const auto& wv2 = t.node(wi).value;
    const int Hp2 = H + 2 * padding, Wp2 = W + 2 * padding;
    std::vector<double> xp(static_cast<size_t>(Hp2) * Wp2);
    std::vector<double> gxp(static_cast<size_t>(Hp2) * Wp2);
    for (int ni = 0; ni < N; ++ni) {
      for (int c = 0; c < C; ++c) {
        const double* grow = &g[(static_cast<size_t>(ni) * C + c) * Ho * Wo];
        if (bi >= 0 && t.node(bi).requires_grad) {
          double s = 0.0;
          for (int i = 0; i < Ho * Wo; ++i) s += grow[i];
          t.node(bi).grad[c] += s;
        }
        if (t.node(wi).requires_grad) {
          pad_sample(&xv2[(static_cast<size_t>(ni) * C + c) * H * W], 1, H, W, padding, xp);
          double* wg = &t.node(wi).grad[static_cast<size_t>(c) * kh * kw];
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              const double gv = grow[static_cast<size_t>(oy) * Wo + ox];
              if (gv == 0.0) continue;
              const double* xrow = &xp[static_cast<size_t>(oy * stride) * Wp2 + ox * stride];
              double* wrow = wg;
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) wrow[kx] += gv * xrow[kx];
                wrow += kw;
                xrow += Wp2;
              }
            }
          }
        }
        if (t.node(xi).requires_grad) {
          std::fill(gxp.begin(), gxp.end(), 0.0);
          const double* wbase = &wv2[static_cast<size_t>(c) * kh * kw];
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              const double gv = grow[static_cast<size_t>(oy) * Wo + ox];
              if (gv == 0.0) continue;
              double* xrow = &gxp[static_cast<size_t>(oy * stride) * Wp2 + ox * stride];
              const double* wrow = wbase;
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) xrow[kx] += gv * wrow[kx];
                wrow += kw;
                xrow += Wp2;
              }
            }
          }
          double* gx = &t.node(xi).grad[(static_cast<size_t>(ni) * C + c) * H * W];
          for (int y = 0; y < H; ++y) {
            const double* src = &gxp[static_cast<size_t>(y + padding) * Wp2 + padding];
            for (int xx = 0; xx < W; ++xx) gx[static_cast<size_t>(y) * W + xx] += src[xx];
          }
        }
      }
    }
  };
  return handle(push(std::move(n), "depthwise_conv2d"));
}

Tensor Tape::slice_channels(Tensor x, int c0, int c1) {
  const auto& xs = node(x.id_).shape;
  if (xs.size() != 4) throw ShapeError("slice_channels: need [N,C,H,W], got " + shape_str(xs));
  if (c0 < 0 || c1 <= c0 || c1 > xs[1]) {
    throw ConfigError("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                      ") out of " + std::to_string(xs[1]) + " channels");
  }
  const int N = xs[0], C = xs[1];
  const size_t plane = static_cast<size_t>(xs[2]) * xs[3];
  const int Cs = c1 - c0;
  const auto& xv = node(x.id_).value;
  Node n;
  n.shape = {N, Cs, xs[2], xs[3]};
  n.value.resize(static_cast<size_t>(N) * Cs * plane);
  for (int ni = 0; ni < N; ++ni) {
    std::copy(xv.begin() + (static_cast<size_t>(ni) * C + c0) * plane,
              xv.begin() + (static_cast<size_t>(ni) * C + c1) * plane,
              n.value.begin() + static_cast<size_t>(ni) * Cs * plane);
  }
  n.requires_grad = node(x.id_).requires_grad;
  int xi = x.id_;
  n.backprop = [xi, N, C, c0, Cs, plane](Tape& t) {
    if (!t.node(xi).requires_grad) return;
    const auto& g = t.node(t.cur_).grad;
    auto& gx = t.node(xi).grad;
    for (int ni = 0; ni < N; ++ni) {
      const double* src = &g[static_cast<size_t>(ni) * Cs * plane];
      double* dst = &gx[(static_cast<size_t>(ni) * C + c0) * plane];
      for (size_t i = 0; i < static_cast<size_t>(Cs) * plane; ++i) dst[i] += src[i];
    }
  };
  return handle(push(std::move(n), "slice_channels"));
}

Tensor Tape::repeat_channels(Tensor x, int k) {
  const auto& xs = node(x.id_).shape;
  if (xs.size() != 4) throw ShapeError("repeat_channels: need [N,C,H,W], got " + shape_str(xs));
  if (k < 1) throw ConfigError("repeat_channels: k must be >= 1");
  const int N = xs[0], C = xs[1];
  const size_t plane = static_cast<size_t>(xs[2]) * xs[3];
  const auto& xv = node(x.id_).value;
  Node n;
  n.shape = {N, C * k, xs[2], xs[3]};
  n.value.resize(static_cast<size_t>(N) * C * k * plane);
  for (int ni = 0; ni < N; ++ni) {
    for (int c = 0; c < C; ++c) {
      const double* src = &xv[(static_cast<size_t>(ni) * C + c) * plane];
      for (int r = 0; r < k; ++r) {
        std::copy(src, src + plane,
                  n.value.begin() + (static_cast<size_t>(ni) * C * k +
                                     static_cast<size_t>(c) * k + r) * plane);
      }
    }
  }
  n.requires_grad = node(x.id_).requires_grad;
  int xi = x.id_;
  n.backprop = [xi, N, C, k, plane](Tape& t) {
    if (!t.node(xi).requires_grad) return;
    const auto& g = t.node(t.cur_).grad;
    auto& gx = t.node(xi).grad;
    for (int ni = 0; ni < N; ++ni) {
      for (int c = 0; c < C; ++c) {
        double* dst = &gx[(static_cast<size_t>(ni) * C + c) * plane];
        for (int r = 0; r < k; ++r) {
          const double* src = &g[(static_cast<size_t>(ni) * C * k +
                                  static_cast<size_t>(c) * k + r) * plane];
          for (size_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
      }
    }
  };
  return handle(push(std::move(n), "repeat_channels"));
}

Tensor Tape::clamp(Tensor x, double lo, double hi) {
  if (lo > hi) throw ConfigError("clamp: lo > hi");
  const auto& xv = node(x.id_).value;
  Node n;
  n.shape = node(x.id_).shape;
  n.value.resize(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) n.value[i] = std::min(hi, std::max(lo, xv[i]));
  n.requires_grad = node(x.id_).requires_grad;
  int xi = x.id_;
  n.backprop = [xi, lo, hi](Tape& t) {
    if (!t.node(xi).requires_grad) return;
    const auto& g = t.node(t.cur_).grad;
    const auto& xv2 = t.node(xi).value;
    auto& gx = t.node(xi).grad;
    for (size_t i = 0; i < g.size(); ++i) {
      if (xv2[i] > lo && xv2[i] < hi) gx[i] += g[i];
    }
  };
  return handle(push(std::move(n), "clamp"));
}

void Tape::backward(Tensor loss) {
  if (loss.tape_ != this) throw ConfigError("backward: tensor from another tape");
  const auto& ln = node(loss.id_);
  if (ln.value.size() != 1) {
    throw ConfigError("backward: loss must be scalar, got shape " + shape_str(ln.shape));
  }
  // scratch gradients for the reachable prefix
  for (int i = 0; i <= loss.id_; ++i) {
    auto& nd = nodes_[static_cast<size_t>(i)];
    if (nd.requires_grad) {
      nd.grad.assign(nd.value.size(), 0.0);
    }
  }
  if (!node(loss.id_).requires_grad) {
    // nothing trainable upstream; gradients are all zero
    for (auto& nd : nodes_) nd.grad.clear();
    return;
  }
  node(loss.id_).grad[0] = 1.0;
  for (int i = loss.id_; i >= 0; --i) {
    auto& nd = nodes_[static_cast<size_t>(i)];
    if (!nd.requires_grad || nd.is_leaf || !nd.backprop) continue;
    cur_ = i;
    nd.backprop(*this);
  }
  // fold scratch into leaf accumulators, then drop scratch
  for (int i = 0; i <= loss.id_; ++i) {
    auto& nd = nodes_[static_cast<size_t>(i)];
    if (nd.is_leaf && nd.requires_grad) {
      if (nd.acc_grad.empty()) nd.acc_grad.assign(nd.value.size(), 0.0);
      for (size_t j = 0; j < nd.grad.size(); ++j) nd.acc_grad[j] += nd.grad[j];
    }
    nd.grad.clear();
  }
}

void Tape::zero_grad() {
  for (auto& nd : nodes_) {
    if (!nd.acc_grad.empty()) std::fill(nd.acc_grad.begin(), nd.acc_grad.end(), 0.0);
  }
}

}  // namespace xct::diff
