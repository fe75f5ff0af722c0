#pragma once

#include "retro/memory_bank.hpp"
#include "retro/tensor.hpp"

namespace retro::losses {

// Row unit-norm assertions on loss inputs (tolerance 1e-4). On by default.
void set_debug_checks(bool enabled);
bool debug_checks();

/// InfoNCE over one positive and K negatives:
///   -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_j exp(q.n_j/tau)) ),
/// averaged over the batch. q, k_pos: [B,D]; negatives: [K,D].
Tensor info_nce(Tape& tape, const Tensor& q, const Tensor& k_pos, const Tensor& negatives,
                double temperature);

/// Two-direction contrastive loss over per-view banks:
///   1/2 info_nce(q, k', bank_v') + 1/2 info_nce(q', k, bank_v)
/// where q, q' are student embeddings of views v, v' and k, k' the mean
/// student's. bank_v must hold view-v keys and bank_v_prime view-v' keys.
Tensor symmetric_info_nce(Tape& tape, const Tensor& q, const Tensor& q_prime, const Tensor& k,
                          const Tensor& k_prime, const MemoryBank& bank_v,
                          const MemoryBank& bank_v_prime, double temperature);

/// Batch-mean squared distance between student and teacher embeddings,
/// summed over both views.
Tensor consistency_loss(Tape& tape, const Tensor& e_s, const Tensor& e_t, const Tensor& e_s_prime,
                        const Tensor& e_t_prime);

/// consistency_weight * l_dis + gamma * l_con. consistency_weight is 1 in
/// the standard objective; 0 isolates the contrastive term.
Tensor total_loss(Tape& tape, const Tensor& l_dis, const Tensor& l_con, double gamma,
                  double consistency_weight = 1.0);

}  // namespace retro::losses
