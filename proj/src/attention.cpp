#include "lab/attention.hpp"

#include <cmath>

namespace lab::attn {

Mechanism mechanism_from_string(const std::string& s) {
  if (s == "standard") return Mechanism::standard;
  if (s == "sd") return Mechanism::sd;
  if (s == "linear") return Mechanism::linear;
  throw std::invalid_argument("unknown mechanism '" + s + "' (expected standard|sd|linear)");
}

std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::standard: return "standard";
    case Mechanism::sd: return "sd";
    case Mechanism::linear: return "linear";
  }
  return "?";
}

Tensor standard_scores(Tape& tape, const Tensor& x, const Tensor& wq_head, const Tensor& wk_head,
                       int d_head) {
  Tensor q = tape.matmul(x, wq_head);
  Tensor k = tape.matmul(x, wk_head);
  return tape.matmul_nt(q, k, 1.0f / std::sqrt(static_cast<float>(d_head)));
}

SdScores sd_scores(Tape& tape, const Tensor& x, const Tensor& wq_head, const Tensor& wk_head,
                   const Tensor& wd_col, const Tensor& bd_scalar, float epsilon, int d_head) {
  Tensor p = standard_scores(tape, x, wq_head, wk_head, d_head);
  Tensor s = tape.skew_half(p);
  Tensor pre = tape.add_bias_row(tape.matmul(x, wd_col), bd_scalar);
  Tensor d = tape.add_scalar(tape.softplus(pre), epsilon);
  SdScores out;
  out.s = s;
  out.d = d;
  out.l = tape.sub_diag(s, d);
  return out;
}

namespace {

Tensor head_slice(Tape& tape, const Tensor& t, int head, int d_head) {
  return tape.slice_cols(t, head * d_head, (head + 1) * d_head);
}

Tensor linear_head(Tape& tape, const Tensor& qh, const Tensor& kh, const Tensor& vh) {
  Tensor qphi = tape.add_scalar(tape.elu(qh), 1.0f);
  Tensor kphi = tape.add_scalar(tape.elu(kh), 1.0f);
  return tape.linear_attention_head(qphi, kphi, vh, kLinearDenomFloor);
}

}  // namespace

Tensor linear_attention(Tape& tape, const Tensor& x, const Tensor& wq, const Tensor& wk,
                        const Tensor& wv, const Tensor& wo, int heads, int d_head) {
  Tensor q = tape.matmul(x, wq);
  Tensor k = tape.matmul(x, wk);
  Tensor v = tape.matmul(x, wv);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    outs.push_back(linear_head(tape, head_slice(tape, q, h, d_head),
                               head_slice(tape, k, h, d_head), head_slice(tape, v, h, d_head)));
  }
  return tape.matmul(tape.concat_cols(outs), wo);
}

Tensor attention_layer_forward(Tape& tape, const Tensor& x, const LayerParams& p,
                               int layer_index, const AttnIntercept* hooks) {
  if (hooks && tape.grad_enabled()) {
    throw std::logic_error("attention intercepts are eval-only; disable tape gradients");
  }
  const int n = x.rows();
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(p.d_head));
  Tensor q = tape.matmul(x, p.wq);
  Tensor k = tape.matmul(x, p.wk);
  Tensor v = tape.matmul(x, p.wv);
  Tensor dproj;
  if (p.mech == Mechanism::sd) dproj = tape.matmul(x, p.wd);

  std::vector<Tensor> outs;
  outs.reserve(p.heads);
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = head_slice(tape, q, h, p.d_head);
    Tensor kh = head_slice(tape, k, h, p.d_head);
    Tensor vh = head_slice(tape, v, h, p.d_head);
    switch (p.mech) {
      case Mechanism::standard: {
        Tensor scores = tape.matmul_nt(qh, kh, inv_sqrt_d);
        if (hooks && hooks->on_scores) {
          hooks->on_scores(layer_index, h, Mechanism::standard, n, scores.data());
        }
        outs.push_back(tape.matmul(tape.softmax_rows(scores, Mask::causal), vh));
        break;
      }
      case Mechanism::sd: {
        Tensor pm = tape.matmul_nt(qh, kh, inv_sqrt_d);
        Tensor dcol = tape.slice_cols(dproj, h, h + 1);
        Tensor bd_h = tape.slice_cols(p.bd, h, h + 1);
        Tensor d = tape.add_scalar(tape.softplus(tape.add_bias_row(dcol, bd_h)), p.epsilon);
        if (hooks && hooks->on_sd_components) {
          hooks->on_sd_components(layer_index, h, n, pm.data(), d.data());
        }
        Tensor l = tape.sd_interaction(pm, d);
        if (hooks && hooks->on_scores) {
          hooks->on_scores(layer_index, h, Mechanism::sd, n, l.data());
        }
        outs.push_back(tape.matmul(tape.softmax_rows(l, Mask::causal), vh));
        break;
      }
      case Mechanism::linear: {
        Tensor qphi = tape.add_scalar(tape.elu(qh), 1.0f);
        Tensor kphi = tape.add_scalar(tape.elu(kh), 1.0f);
        if (hooks && hooks->on_scores) {
          // Observation only: the unmasked feature-map score matrix.
          Tensor g = tape.matmul_nt(qphi, kphi);
          hooks->on_scores(layer_index, h, Mechanism::linear, n, g.data());
        }
        outs.push_back(tape.linear_attention_head(qphi, kphi, vh, kLinearDenomFloor));
        break;
      }
    }
  }
  return tape.matmul(tape.concat_cols(outs), p.wo);
}

}  // namespace lab::attn
