//! Synthetic decode workloads: seeded, deterministic, memory-capped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sparse_decode::kv_store::{PagedKvCache, SeqId};
use sparse_decode::traffic::estimate_dense;
use sparse_decode::{QueryBlock, Scalar, WorkloadGeometry};

use crate::error::BenchError;

/// How the workload is populated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WorkloadMode {
    /// Keys, values and queries from a seeded standard normal, scaled by
    /// `1/sqrt(D)`.
    Random,
    /// As `Random`, but all query heads of a batch element share one query
    /// vector and the key row at `token` is `gain * query` in every kv head,
    /// so exact top-1 selection is forced for every head.
    PlantedNeedle { token: usize, gain: f32 },
}

pub struct Workload<T> {
    pub cache: PagedKvCache<T>,
    pub seqs: Vec<SeqId>,
    pub queries: QueryBlock<T>,
}

fn mix_seed(seed: u64, lane: u64) -> u64 {
    let mut x = seed ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Build one decode step's worth of synthetic state: per-sequence KV rows
/// plus one query per (batch element, query head). Deterministic in `seed`.
pub fn generate_workload<T: Scalar>(
    geom: &WorkloadGeometry,
    seed: u64,
    mode: WorkloadMode,
    memory_cap_bytes: u64,
) -> Result<Workload<T>, BenchError> {
    geom.validate()?;
    let needed = estimate_dense(geom);
    if needed > memory_cap_bytes {
        return Err(BenchError::ResourceCap {
            needed,
            cap: memory_cap_bytes,
        });
    }
    if let WorkloadMode::PlantedNeedle { token, .. } = mode {
        if token >= geom.context {
            return Err(BenchError::Usage(format!(
                "planted token {token} outside context {}",
                geom.context
            )));
        }
    }

    let d = geom.head_dim;
    let inv_sqrt_d = 1.0f32 / (d as f32).sqrt();
    let mut cache = PagedKvCache::<T>::new(geom.num_kv_heads, d, geom.page_size)?;
    let mut seqs = Vec::with_capacity(geom.batch);
    let mut queries = Vec::with_capacity(geom.batch * geom.num_q_heads * d);

    for b in 0..geom.batch {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
        let mut sample = |rng: &mut ChaCha8Rng| -> f32 {
            let x: f32 = StandardNormal.sample(rng);
            x * inv_sqrt_d
        };

        // Queries first so a planted needle can reuse them.
        let mut q_block: Vec<f32> = (0..geom.num_q_heads * d)
            .map(|_| sample(&mut rng))
            .collect();
        if matches!(mode, WorkloadMode::PlantedNeedle { .. }) {
            let shared: Vec<f32> = q_block[..d].to_vec();
            for h in 1..geom.num_q_heads {
                q_block[h * d..(h + 1) * d].copy_from_slice(&shared);
            }
        }

        let row = geom.num_kv_heads * d;
        let mut keys: Vec<T> = Vec::with_capacity(geom.context * row);
        let mut values: Vec<T> = Vec::with_capacity(geom.context * row);
        for t in 0..geom.context {
            for _kvh in 0..geom.num_kv_heads {
                let plant = match mode {
                    WorkloadMode::PlantedNeedle { token, gain } if token == t => Some(gain),
                    _ => None,
                };
                for dim in 0..d {
                    let k = match plant {
                        Some(gain) => gain * q_block[dim],
                        None => sample(&mut rng),
                    };
                    keys.push(T::from_f32(k));
                    values.push(T::from_f32(sample(&mut rng)));
                }
            }
        }

        let seq = SeqId(b as u64);
        cache.append_tokens(seq, &keys, &values, geom.context)?;
        seqs.push(seq);
        queries.extend(q_block.iter().map(|&x| T::from_f32(x)));
    }

    let queries = QueryBlock::new(queries, geom.batch, geom.num_q_heads, d)?;
    Ok(Workload {
        cache,
        seqs,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparse_decode::scalar::widen;
    use sparse_decode::selectors::select_oracle_topk;

    fn small_geom() -> WorkloadGeometry {
        WorkloadGeometry {
            batch: 2,
            context: 100,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            element_width: 4,
            page_size: 16,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_workload::<f32>(&small_geom(), 7, WorkloadMode::Random, u64::MAX).unwrap();
        let b = generate_workload::<f32>(&small_geom(), 7, WorkloadMode::Random, u64::MAX).unwrap();
        let all: Vec<u32> = (0..100).collect();
        for kvh in 0..2 {
            let (ka, va) = a.cache.gather_rows(SeqId(0), kvh, &all).unwrap();
            let (kb, vb) = b.cache.gather_rows(SeqId(0), kvh, &all).unwrap();
            assert_eq!(ka, kb);
            assert_eq!(va, vb);
        }
        assert_eq!(a.queries.query(1, 3), b.queries.query(1, 3));

        let c = generate_workload::<f32>(&small_geom(), 8, WorkloadMode::Random, u64::MAX).unwrap();
        let (ka, _) = a.cache.gather_rows(SeqId(0), 0, &all).unwrap();
        let (kc, _) = c.cache.gather_rows(SeqId(0), 0, &all).unwrap();
        assert_ne!(ka, kc);
    }

    #[test]
    fn desk_geometry_accounts_one_gibibyte() {
        let geom = WorkloadGeometry {
            batch: 8,
            context: 32768,
            num_q_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            element_width: 2,
            page_size: 16,
        };
        assert_eq!(estimate_dense(&geom), 1 << 30);
    }

    #[test]
    fn memory_cap_is_enforced() {
        let geom = small_geom();
        let needed = estimate_dense(&geom);
        let err = generate_workload::<f32>(&geom, 7, WorkloadMode::Random, needed - 1).unwrap_err();
        match err {
            BenchError::ResourceCap { needed: n, cap } => {
                assert_eq!(n, needed);
                assert_eq!(cap, needed - 1);
            }
            other => panic!("wrong error: {other}"),
        }
        assert!(generate_workload::<f32>(&geom, 7, WorkloadMode::Random, needed).is_ok());
    }

    #[test]
    fn planted_needle_wins_top1_for_every_head() {
        let geom = small_geom();
        let w = generate_workload::<f32>(
            &geom,
            21,
            WorkloadMode::PlantedNeedle {
                token: 37,
                gain: 50.0,
            },
            u64::MAX,
        )
        .unwrap();
        let cfg = sparse_decode::AttentionConfig::new(4, 2, 8).unwrap();
        let mut q = Vec::new();
        for b in 0..2 {
            for h in 0..4 {
                widen(w.queries.query(b, h), &mut q);
                let top =
                    select_oracle_topk(&w.cache, w.seqs[b], cfg.kv_head_for(h), &q, cfg.scale, 1)
                        .unwrap();
                assert_eq!(top, vec![37], "b={b} h={h}");
            }
        }
    }

    #[test]
    fn half_precision_workload_is_deterministic() {
        use half::f16;
        let a = generate_workload::<f16>(&small_geom(), 3, WorkloadMode::Random, u64::MAX).unwrap();
        let b = generate_workload::<f16>(&small_geom(), 3, WorkloadMode::Random, u64::MAX).unwrap();
        let all: Vec<u32> = (0..100).collect();
        let (ka, _) = a.cache.gather_rows(SeqId(1), 1, &all).unwrap();
        let (kb, _) = b.cache.gather_rows(SeqId(1), 1, &all).unwrap();
        assert_eq!(ka, kb);
    }
}
