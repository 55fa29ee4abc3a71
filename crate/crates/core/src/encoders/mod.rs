//! Video and text towers, projection heads and the contrastive similarity.

mod head;
mod layers;
mod params;
mod towers;

pub use head::{similarity, HeadConfig, ProjectionHead};
pub use layers::{Attention, FeedForward, LayerNorm, Linear};
pub use params::{uniform, xavier, CheckpointHeader, Graph, ParamEntry, ParamId, ParamStore, CHECKPOINT_FORMAT};
pub use towers::{Embedding, Encoded, TextEncoder, TextEncoderConfig, VideoEncoder, VideoEncoderConfig};

use crate::error::Result;
use crate::substrate::Tape;
use crate::textproc::TokenSequence;
use crate::videoproc::VideoTensor;

/// Forward pass without gradients.
pub fn encode_video(encoder: &VideoEncoder, store: &ParamStore, video: &VideoTensor) -> Result<Embedding> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store);
    let e = encoder.forward(&mut g, video)?;
    Ok(Embedding::from_graph(&g, e))
}

pub fn encode_text(encoder: &TextEncoder, store: &ParamStore, seq: &TokenSequence) -> Result<Embedding> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store);
    let e = encoder.forward(&mut g, seq)?;
    Ok(Embedding::from_graph(&g, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::substrate::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn video_cfg() -> VideoEncoderConfig {
        VideoEncoderConfig {
            layers: 1,
            max_frames: 4,
            max_patches: 4,
            ..Default::default()
        }
    }

    fn random_video(f: usize, hw: usize, seed: u64) -> VideoTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * f * hw * hw).map(|_| r.gen::<f32>()).collect();
        VideoTensor::new(3, f, hw, hw, data).unwrap()
    }

    #[test]
    fn video_token_shape() {
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut store, "v", &video_cfg(), &mut rng()).unwrap();
        let e = encode_video(&enc, &store, &random_video(4, 16, 1)).unwrap();
        assert_eq!(e.tokens.shape(), &[17, 32]);
        assert_eq!(e.cls.len(), 32);
        assert_eq!(&e.cls[..], e.tokens.row(0));
    }

    #[test]
    fn zero_video_is_finite() {
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut store, "v", &video_cfg(), &mut rng()).unwrap();
        let e = encode_video(&enc, &store, &VideoTensor::zeros(3, 4, 16, 16)).unwrap();
        assert!(e.tokens.is_finite());
    }

    #[test]
    fn indivisible_grid_is_a_shape_error() {
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut store, "v", &video_cfg(), &mut rng()).unwrap();
        let err = encode_video(&enc, &store, &VideoTensor::zeros(3, 2, 12, 16)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn frame_order_reaches_cls() {
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(&mut store, "v", &video_cfg(), &mut rng()).unwrap();
        let v = random_video(4, 16, 2);
        let a = encode_video(&enc, &store, &v).unwrap();
        let b = encode_video(&enc, &store, &v.select_frames(&[3, 2, 1, 0]).unwrap()).unwrap();
        let diff: f64 = a.cls.iter().zip(&b.cls).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.0);
    }

    fn text_enc(store: &mut ParamStore, layers: usize) -> TextEncoder {
        let cfg = TextEncoderConfig {
            layers,
            vocab_size: 20,
            max_len: 8,
            ..Default::default()
        };
        TextEncoder::new(store, "t", &cfg, &mut rng()).unwrap()
    }

    #[test]
    fn text_shapes_and_limits() {
        let mut store = ParamStore::new();
        let enc = text_enc(&mut store, 2);
        let e = encode_text(&enc, &store, &TokenSequence(vec![2, 5, 6, 7, 8])).unwrap();
        assert_eq!(e.tokens.shape(), &[5, 32]);
        assert_eq!(&e.cls[..], e.tokens.row(0));
        let one = encode_text(&enc, &store, &TokenSequence(vec![2])).unwrap();
        assert!(one.cls.iter().all(|x| x.is_finite()));
        let long = TokenSequence(vec![4; 9]);
        assert!(matches!(encode_text(&enc, &store, &long), Err(Error::Shape(_))));
    }

    #[test]
    fn token_order_reaches_cls() {
        let mut store = ParamStore::new();
        let enc = text_enc(&mut store, 2);
        let a = encode_text(&enc, &store, &TokenSequence(vec![2, 5, 6, 7])).unwrap();
        let b = encode_text(&enc, &store, &TokenSequence(vec![2, 6, 5, 7])).unwrap();
        assert!(a.cls.iter().zip(&b.cls).any(|(x, y)| x != y));
    }

    /// Head whose projections are the identity, so `s` is the cosine of the inputs.
    fn identity_head(store: &mut ParamStore, d: usize) -> ProjectionHead {
        let cfg = HeadConfig {
            proj_dim: d,
            ..Default::default()
        };
        let head = ProjectionHead::new(store, "h", d, &cfg, &mut rng()).unwrap();
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        *store.get_mut(head.video.weight).unwrap() = eye.clone();
        *store.get_mut(head.text.weight).unwrap() = eye;
        head
    }

    #[test]
    fn similarity_cosine_cases() {
        let mut store = ParamStore::new();
        let head = identity_head(&mut store, 3);
        let s = similarity(&[1.0, 2.0, 0.0], &[2.0, 4.0, 0.0], &head, &store).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let s = similarity(&[1.0, 0.0, 0.0], &[0.0, 3.0, 0.0], &head, &store).unwrap();
        assert_eq!(s, 0.0);
        let err = similarity(&[0.0; 3], &[1.0, 0.0, 0.0], &head, &store).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    fn naive_similarity(v: &[f64], t: &[f64], head: &ProjectionHead, store: &ParamStore) -> f64 {
        let proj = |x: &[f64], lin: &Linear| -> Vec<f64> {
            let w = store.get(lin.weight);
            let b = store.get(lin.bias.unwrap());
            (0..lin.fan_out)
                .map(|j| b.data()[j] + (0..lin.fan_in).map(|i| x[i] * w.data()[i * lin.fan_out + j]).sum::<f64>())
                .collect()
        };
        let (a, b) = (proj(v, &head.video), proj(t, &head.text));
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter().zip(&b).map(|(x, y)| (x / na) * (y / nb)).sum()
    }

    #[test]
    fn similarity_matches_oracle_and_ignores_scale() {
        let mut store = ParamStore::new();
        let head = ProjectionHead::new(&mut store, "h", 8, &HeadConfig::default(), &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let s = similarity(&v, &t, &head, &store).unwrap();
            assert!((s - naive_similarity(&v, &t, &head, &store)).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&s));

            let mut scaled = store.clone();
            for id in [head.video.weight, head.video.bias.unwrap()] {
                let t = scaled.get_mut(id).unwrap();
                *t = t.map(|x| 3.7 * x);
            }
            let s2 = similarity(&v, &t, &head, &scaled).unwrap();
            assert!((s - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_text_to_similarity() {
        let mut store = ParamStore::new();
        let enc = text_enc(&mut store, 2);
        let head = ProjectionHead::new(&mut store, "h", 32, &HeadConfig::default(), &mut rng()).unwrap();
        let checked: Vec<ParamId> = ["t.token_embed", "t.block0.attn.query.weight", "t.block1.ffn.up.weight", "h.text.weight"]
            .iter()
            .map(|n| store.id(n).unwrap())
            .collect();
        let inputs: Vec<Tensor> = checked.iter().map(|&id| store.get(id).clone()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let v_cls: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
        let seq = TokenSequence(vec![2, 7, 9, 11, 3]);
        let err = grad_check(
            |tape, vars| {
                let mut g = Graph::new(tape, &store);
                for (&id, &v) in checked.iter().zip(vars) {
                    g.bind(id, v)?;
                }
                let e = enc.forward(&mut g, &seq)?;
                let v = g.constant(Tensor::matrix(1, 32, v_cls.clone())?);
                let s = head.similarity_matrix(&mut g, v, e.cls)?;
                Ok(g.sum(s))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
