#include "hica/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "hica/kernels.hpp"

namespace hica {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(t)) without overflow
double softplus(double t) {
  return std::log1p(std::exp(-std::fabs(t))) + (t > 0.0 ? t : 0.0);
}

}  // namespace

void GradSet::add(const GradSet& other) {
  for (const auto& [ptr, g] : other.entries) {
    if (Tensor2* mine = find(*ptr)) {
      check_same_shape(*mine, g, "GradSet::add");
      for (int i = 0; i < g.size(); ++i) mine->data[i] += g.data[i];
    } else {
      entries.emplace_back(ptr, g);
    }
  }
}

int Tape::check(ValueId id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("Tape: bad value id " + std::to_string(id));
  return id;
}

ValueId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Tape::input(Tensor2 v) {
  Node n;
  n.op = Op::input;
  n.value = std::move(v);
  return push(std::move(n));
}

ValueId Tape::param(Param& p) {
  auto it = leaf_ids_.find(&p);
  if (it != leaf_ids_.end()) return it->second;
  Node n;
  n.op = Op::leaf;
  n.value = p.value;
  n.leaf = &p;
  n.needs_grad = true;
  const ValueId id = push(std::move(n));
  leaf_ids_.emplace(&p, id);
  return id;
}

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Tensor2& av = val(a);
  const Tensor2& bv = val(b);
  if (av.cols != bv.rows)
    throw std::invalid_argument("matmul: inner dimensions differ, " + av.shape_str() + " * " +
                                bv.shape_str());
  Node n;
  n.op = Op::matmul;
  n.a = a;
  n.b = b;
  n.needs_grad = needs(a) || needs(b);
  n.value = Tensor2(av.rows, bv.cols);
  kernels::active().matmul_acc(av.data.data(), bv.data.data(), n.value.data.data(), av.rows,
                               av.cols, bv.cols);
  return push(std::move(n));
}

ValueId Tape::matmul_nt(ValueId a, ValueId b) {
  const Tensor2& av = val(a);
  const Tensor2& bv = val(b);
  if (av.cols != bv.cols)
    throw std::invalid_argument("matmul_nt: contraction widths differ, " + av.shape_str() +
                                " * (" + bv.shape_str() + ")^T");
  Node n;
  n.op = Op::matmul_nt;
  n.a = a;
  n.b = b;
  n.needs_grad = needs(a) || needs(b);
  n.value = Tensor2(av.rows, bv.rows);
  kernels::active().matmul_nt_acc(av.data.data(), bv.data.data(), n.value.data.data(), av.rows,
                                  av.cols, bv.rows);
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) {
  const Tensor2& av = val(a);
  const Tensor2& bv = val(b);
  check_same_shape(av, bv, "add");
  Node n;
  n.op = Op::add;
  n.a = a;
  n.b = b;
  n.needs_grad = needs(a) || needs(b);
  n.value = av;
  for (int i = 0; i < bv.size(); ++i) n.value.data[i] += bv.data[i];
  return push(std::move(n));
}

ValueId Tape::hadamard(ValueId a, ValueId b) {
  const Tensor2& av = val(a);
  const Tensor2& bv = val(b);
  check_same_shape(av, bv, "hadamard");
  Node n;
  n.op = Op::hadamard;
  n.a = a;
  n.b = b;
  n.needs_grad = needs(a) || needs(b);
  n.value = av;
  for (int i = 0; i < bv.size(); ++i) n.value.data[i] *= bv.data[i];
  return push(std::move(n));
}

ValueId Tape::add_row(ValueId x, ValueId row) {
  const Tensor2& xv = val(x);
  const Tensor2& rv = val(row);
  if (rv.rows != 1 || rv.cols != xv.cols)
    throw std::invalid_argument("add_row: row is " + rv.shape_str() + ", expected 1x" +
                                std::to_string(xv.cols));
  Node n;
  n.op = Op::add_row;
  n.a = x;
  n.b = row;
  n.needs_grad = needs(x) || needs(row);
  n.value = xv;
  for (int r = 0; r < xv.rows; ++r)
    for (int j = 0; j < xv.cols; ++j) n.value.at(r, j) += rv.at(0, j);
  return push(std::move(n));
}

ValueId Tape::scale(ValueId x, double s) {
  Node n;
  n.op = Op::scale;
  n.a = x;
  n.scalar = s;
  n.needs_grad = needs(x);
  n.value = val(x);
  for (double& v : n.value.data) v *= s;
  return push(std::move(n));
}

ValueId Tape::softmax_rows(ValueId x) {
  const Tensor2& xv = val(x);
  Node n;
  n.op = Op::softmax_rows;
  n.a = x;
  n.needs_grad = needs(x);
  n.value = Tensor2(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    double m = -1e300;
    for (int j = 0; j < xv.cols; ++j) m = std::max(m, xv.at(r, j));
    double sum = 0.0;
    for (int j = 0; j < xv.cols; ++j) {
      const double e = std::exp(xv.at(r, j) - m);
      n.value.at(r, j) = e;
      sum += e;
    }
    for (int j = 0; j < xv.cols; ++j) n.value.at(r, j) /= sum;
  }
  return push(std::move(n));
}

ValueId Tape::layer_norm(ValueId x, ValueId gain, ValueId bias, double eps) {
  const Tensor2& xv = val(x);
  const Tensor2& gv = val(gain);
  const Tensor2& bv = val(bias);
  if (gv.rows != 1 || gv.cols != xv.cols || bv.rows != 1 || bv.cols != xv.cols)
    throw std::invalid_argument("layer_norm: gain " + gv.shape_str() + " / bias " +
                                bv.shape_str() + " must be 1x" + std::to_string(xv.cols));
  Node n;
  n.op = Op::layer_norm;
  n.a = x;
  n.b = gain;
  n.c = bias;
  n.needs_grad = needs(x) || needs(gain) || needs(bias);
  n.value = Tensor2(xv.rows, xv.cols);
  n.aux = Tensor2(xv.rows, xv.cols);   // x-hat
  n.aux2 = Tensor2(xv.rows, 1);        // inv std per row
  const int c = xv.cols;
  for (int r = 0; r < xv.rows; ++r) {
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xv.at(r, j);
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = xv.at(r, j) - mean;
      var += d * d;
    }
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    n.aux2.at(r, 0) = inv;
    for (int j = 0; j < c; ++j) {
      const double xh = (xv.at(r, j) - mean) * inv;
      n.aux.at(r, j) = xh;
      n.value.at(r, j) = xh * gv.at(0, j) + bv.at(0, j);
    }
  }
  return push(std::move(n));
}

ValueId Tape::gelu(ValueId x) {
  const Tensor2& xv = val(x);
  Node n;
  n.op = Op::gelu;
  n.a = x;
  n.needs_grad = needs(x);
  n.value = Tensor2(xv.rows, xv.cols);
  for (int i = 0; i < xv.size(); ++i) {
    const double v = xv.data[i];
    n.value.data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return push(std::move(n));
}

ValueId Tape::concat_cols(const std::vector<ValueId>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int rows = val(parts[0]).rows;
  int cols = 0;
  bool ng = false;
  for (ValueId p : parts) {
    const Tensor2& v = val(p);
    if (v.rows != rows)
      throw std::invalid_argument("concat_cols: row count mismatch, " + v.shape_str() + " vs " +
                                  std::to_string(rows) + " rows");
    cols += v.cols;
    ng = ng || needs(p);
  }
  Node n;
  n.op = Op::concat_cols;
  n.list = parts;
  n.needs_grad = ng;
  n.value = Tensor2(rows, cols);
  int off = 0;
  for (ValueId p : parts) {
    const Tensor2& v = val(p);
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < v.cols; ++j) n.value.at(r, off + j) = v.at(r, j);
    off += v.cols;
  }
  return push(std::move(n));
}

ValueId Tape::concat_rows(const std::vector<ValueId>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int cols = val(parts[0]).cols;
  int rows = 0;
  bool ng = false;
  for (ValueId p : parts) {
    const Tensor2& v = val(p);
    if (v.cols != cols)
      throw std::invalid_argument("concat_rows: width mismatch, " + v.shape_str() + " vs width " +
                                  std::to_string(cols));
    rows += v.rows;
    ng = ng || needs(p);
  }
  Node n;
  n.op = Op::concat_rows;
  n.list = parts;
  n.needs_grad = ng;
  n.value = Tensor2(rows, cols);
  int off = 0;
  for (ValueId p : parts) {
    const Tensor2& v = val(p);
    for (int r = 0; r < v.rows; ++r)
      for (int j = 0; j < cols; ++j) n.value.at(off + r, j) = v.at(r, j);
    off += v.rows;
  }
  return push(std::move(n));
}

ValueId Tape::mean_rows(ValueId x) {
  const Tensor2& xv = val(x);
  if (xv.rows < 1) throw std::invalid_argument("mean_rows: empty input");
  Node n;
  n.op = Op::mean_rows;
  n.a = x;
  n.needs_grad = needs(x);
  n.value = Tensor2(1, xv.cols);
  for (int r = 0; r < xv.rows; ++r)
    for (int j = 0; j < xv.cols; ++j) n.value.at(0, j) += xv.at(r, j);
  for (int j = 0; j < xv.cols; ++j) n.value.at(0, j) /= xv.rows;
  return push(std::move(n));
}

ValueId Tape::sum_all(ValueId x) {
  const Tensor2& xv = val(x);
  Node n;
  n.op = Op::sum_all;
  n.a = x;
  n.needs_grad = needs(x);
  n.value = Tensor2(1, 1);
  double s = 0.0;
  for (double v : xv.data) s += v;
  n.value.at(0, 0) = s;
  return push(std::move(n));
}

ValueId Tape::bce_with_logits_masked(ValueId z, const Tensor2& gold, const Tensor2& pos_weight,
                                     const Tensor2& mask, Tensor2* raw_out,
                                     Tensor2* masked_out) {
  const Tensor2& zv = val(z);
  check_same_shape(zv, gold, "bce: logits vs gold");
  check_same_shape(zv, pos_weight, "bce: logits vs weights");
  check_same_shape(zv, mask, "bce: logits vs mask");
  double cm = 0.0;
  for (double m : mask.data) cm += m;
  if (cm < 1.0)
    throw std::invalid_argument("bce: mask selects no entries");

  Tensor2 raw(zv.rows, zv.cols);
  Tensor2 masked(zv.rows, zv.cols);
  Node n;
  n.op = Op::bce_masked;
  n.a = z;
  n.needs_grad = needs(z);
  n.aux = Tensor2(zv.rows, zv.cols);  // dL/dz per entry
  double total = 0.0;
  for (int i = 0; i < zv.size(); ++i) {
    const double zi = zv.data[i];
    const double gt = gold.data[i];
    const double w = pos_weight.data[i];
    const double m = mask.data[i];
    // raw = -(gt * log(sigmoid) * w + (1-gt) * log(1-sigmoid))
    const double r = gt * w * softplus(-zi) + (1.0 - gt) * softplus(zi);
    raw.data[i] = r;
    masked.data[i] = r * m;
    total += r * m;
    const double sig = stable_sigmoid(zi);
    n.aux.data[i] = m * (gt * w * (sig - 1.0) + (1.0 - gt) * sig) / cm;
  }
  n.value = Tensor2(1, 1);
  n.value.at(0, 0) = total / cm;
  if (!n.value.all_finite())
    throw std::runtime_error("bce: non-finite loss");
  if (raw_out != nullptr) *raw_out = std::move(raw);
  if (masked_out != nullptr) *masked_out = std::move(masked);
  return push(std::move(n));
}

GradSet Tape::backward(ValueId root) {
  const Tensor2& rv = val(root);
  if (rv.rows != 1 || rv.cols != 1)
    throw std::invalid_argument("backward: root is " + rv.shape_str() + ", expected a 1x1 scalar");

  std::vector<Tensor2> grads(nodes_.size());
  std::vector<char> has(nodes_.size(), 0);

  auto g = [&](int id) -> Tensor2& {
    if (!has[id]) {
      grads[id] = Tensor2(nodes_[id].value.rows, nodes_[id].value.cols);
      has[id] = 1;
    }
    return grads[id];
  };

  if (nodes_[root].needs_grad) g(root).at(0, 0) = 1.0;

  const kernels::Ops& K = kernels::active();

  for (int i = root; i >= 0; --i) {
    if (!has[i] || !nodes_[i].needs_grad) continue;
    const Node& n = nodes_[i];
    const Tensor2& dy = grads[i];
    switch (n.op) {
      case Op::input:
      case Op::leaf:
        break;
      case Op::matmul: {
        const Tensor2& av = nodes_[n.a].value;
        const Tensor2& bv = nodes_[n.b].value;
        if (needs(n.a))
          K.matmul_nt_acc(dy.data.data(), bv.data.data(), g(n.a).data.data(), av.rows, bv.cols,
                          av.cols);
        if (needs(n.b))
          K.matmul_tn_acc(av.data.data(), dy.data.data(), g(n.b).data.data(), av.cols, av.rows,
                          bv.cols);
        break;
      }
      case Op::matmul_nt: {
        const Tensor2& av = nodes_[n.a].value;
        const Tensor2& bv = nodes_[n.b].value;
        if (needs(n.a))
          K.matmul_acc(dy.data.data(), bv.data.data(), g(n.a).data.data(), av.rows, bv.rows,
                       av.cols);
        if (needs(n.b))
          K.matmul_tn_acc(dy.data.data(), av.data.data(), g(n.b).data.data(), bv.rows, av.rows,
                          av.cols);
        break;
      }
      case Op::add: {
        for (int p : {n.a, n.b}) {
          if (!needs(p)) continue;
          Tensor2& gp = g(p);
          for (int j = 0; j < dy.size(); ++j) gp.data[j] += dy.data[j];
        }
        break;
      }
      case Op::hadamard: {
        if (needs(n.a)) {
          Tensor2& ga = g(n.a);
          const Tensor2& bv = nodes_[n.b].value;
          for (int j = 0; j < dy.size(); ++j) ga.data[j] += dy.data[j] * bv.data[j];
        }
        if (needs(n.b)) {
          Tensor2& gb = g(n.b);
          const Tensor2& av = nodes_[n.a].value;
          for (int j = 0; j < dy.size(); ++j) gb.data[j] += dy.data[j] * av.data[j];
        }
        break;
      }
      case Op::add_row: {
        if (needs(n.a)) {
          Tensor2& gx = g(n.a);
          for (int j = 0; j < dy.size(); ++j) gx.data[j] += dy.data[j];
        }
        if (needs(n.b)) {
          Tensor2& gr = g(n.b);
          for (int r = 0; r < dy.rows; ++r)
            for (int j = 0; j < dy.cols; ++j) gr.at(0, j) += dy.at(r, j);
        }
        break;
      }
      case Op::scale: {
        if (needs(n.a)) K.axpy(g(n.a).data.data(), n.scalar, dy.data.data(), dy.size());
        break;
      }
      case Op::softmax_rows: {
        if (!needs(n.a)) break;
        Tensor2& gx = g(n.a);
        const Tensor2& y = n.value;
        for (int r = 0; r < y.rows; ++r) {
          double s = 0.0;
          for (int j = 0; j < y.cols; ++j) s += dy.at(r, j) * y.at(r, j);
          for (int j = 0; j < y.cols; ++j) gx.at(r, j) += y.at(r, j) * (dy.at(r, j) - s);
        }
        break;
      }
      case Op::layer_norm: {
        const Tensor2& xhat = n.aux;
        const Tensor2& gv = nodes_[n.b].value;
        const int c = dy.cols;
        if (needs(n.b)) {
          Tensor2& gg = g(n.b);
          for (int r = 0; r < dy.rows; ++r)
            for (int j = 0; j < c; ++j) gg.at(0, j) += dy.at(r, j) * xhat.at(r, j);
        }
        if (needs(n.c)) {
          Tensor2& gb = g(n.c);
          for (int r = 0; r < dy.rows; ++r)
            for (int j = 0; j < c; ++j) gb.at(0, j) += dy.at(r, j);
        }
        if (needs(n.a)) {
          Tensor2& gx = g(n.a);
          for (int r = 0; r < dy.rows; ++r) {
            double m1 = 0.0;  // mean of gain*dy
            double m2 = 0.0;  // mean of gain*dy*xhat
            for (int j = 0; j < c; ++j) {
              const double t = gv.at(0, j) * dy.at(r, j);
              m1 += t;
              m2 += t * xhat.at(r, j);
            }
            m1 /= c;
            m2 /= c;
            const double inv = n.aux2.at(r, 0);
            for (int j = 0; j < c; ++j) {
              const double t = gv.at(0, j) * dy.at(r, j);
              gx.at(r, j) += inv * (t - m1 - xhat.at(r, j) * m2);
            }
          }
        }
        break;
      }
      case Op::gelu: {
        if (!needs(n.a)) break;
        Tensor2& gx = g(n.a);
        const Tensor2& xv = nodes_[n.a].value;
        for (int j = 0; j < dy.size(); ++j) {
          const double x = xv.data[j];
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          gx.data[j] += dy.data[j] * (cdf + x * pdf);
        }
        break;
      }
      case Op::concat_cols: {
        int off = 0;
        for (int p : n.list) {
          const Tensor2& pv = nodes_[p].value;
          if (needs(p)) {
            Tensor2& gp = g(p);
            for (int r = 0; r < pv.rows; ++r)
              for (int j = 0; j < pv.cols; ++j) gp.at(r, j) += dy.at(r, off + j);
          }
          off += pv.cols;
        }
        break;
      }
      case Op::concat_rows: {
        int off = 0;
        for (int p : n.list) {
          const Tensor2& pv = nodes_[p].value;
          if (needs(p)) {
            Tensor2& gp = g(p);
            for (int r = 0; r < pv.rows; ++r)
              for (int j = 0; j < pv.cols; ++j) gp.at(r, j) += dy.at(off + r, j);
          }
          off += pv.rows;
        }
        break;
      }
      case Op::mean_rows: {
        if (!needs(n.a)) break;
        Tensor2& gx = g(n.a);
        const double inv = 1.0 / gx.rows;
        for (int r = 0; r < gx.rows; ++r)
          for (int j = 0; j < gx.cols; ++j) gx.at(r, j) += dy.at(0, j) * inv;
        break;
      }
      case Op::sum_all: {
        if (!needs(n.a)) break;
        Tensor2& gx = g(n.a);
        const double d = dy.at(0, 0);
        for (double& v : gx.data) v += d;
        break;
      }
      case Op::bce_masked: {
        if (!needs(n.a)) break;
        Tensor2& gz = g(n.a);
        const double d = dy.at(0, 0);
        for (int j = 0; j < gz.size(); ++j) gz.data[j] += d * n.aux.data[j];
        break;
      }
    }
  }

  GradSet out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::leaf && has[i])
      out.entries.emplace_back(nodes_[i].leaf, std::move(grads[i]));
  }
  return out;
}

}  // namespace hica
