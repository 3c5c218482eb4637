use candle_core::{DType, Device, Tensor, Var};

use super::FrameEmbedding;
use crate::{Error, Result};

/// One linear map `[c_block, d_img]` per UNet block with a temporal transformer.
#[derive(Debug, Clone)]
pub struct InjectorWeights {
    maps: Vec<Var>,
}

impl InjectorWeights {
    /// Zero-initialised maps, one per entry of `block_widths`.
    pub fn zeros(block_widths: &[usize], d_img: usize, device: &Device) -> Result<Self> {
        let maps = block_widths
            .iter()
            .map(|&c| Var::zeros((c, d_img), DType::F32, device))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self { maps })
    }

    pub fn from_tensors(maps: &[Tensor]) -> Result<Self> {
        let d = maps.first().map(|m| m.dims()[1]);
        if maps.iter().any(|m| m.rank() != 2 || Some(m.dims()[1]) != d) {
            return Err(Error::Shape(
                "injector maps must be [c, d_img] with a shared d_img".into(),
            ));
        }
        let maps = maps.iter().map(Var::from_tensor).collect::<candle_core::Result<_>>()?;
        Ok(Self { maps })
    }

    pub fn blocks(&self) -> usize {
        self.maps.len()
    }

    pub fn d_img(&self) -> usize {
        self.maps.first().map_or(0, |m| m.dims()[1])
    }

    pub fn map(&self, block: usize) -> Result<&Var> {
        self.maps.get(block).ok_or(Error::MissingBlock(block))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.maps.clone()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.maps.iter().map(|m| m.as_tensor().clone()).collect()
    }
}

/// `h_t = h_s + W_p psi`, broadcast over every row (spatial position) and
/// frame of temporal-layout hidden states `[(b*h*w), f, c]`.
pub fn inject_appearance(
    h_s: &Tensor,
    emb: &FrameEmbedding,
    weights: &InjectorWeights,
    block: usize,
) -> Result<Tensor> {
    let map = weights.map(block)?;
    let e = Tensor::from_slice(&emb.vector, (1, emb.dim()), h_s.device())?;
    project_and_add(h_s, &e, map.as_tensor(), 1)
}

/// The broadcast term `W_p psi` that [`inject_appearance`] adds, expanded to
/// the shape of `h_s`.
pub fn injected_term(h_s: &Tensor, emb: &FrameEmbedding, weights: &InjectorWeights, block: usize) -> Result<Tensor> {
    let map = weights.map(block)?;
    let e = Tensor::from_slice(&emb.vector, (1, emb.dim()), h_s.device())?;
    let (rows, f, c) = h_s.dims3()?;
    let proj = projection(&e, map.as_tensor(), c)?;
    Ok(proj.reshape((1, 1, c))?.broadcast_as((rows, f, c))?.contiguous()?)
}

fn projection(emb: &Tensor, map: &Tensor, c: usize) -> Result<Tensor> {
    let (mc, md) = map.dims2()?;
    if mc != c || emb.dim(1)? != md {
        return Err(Error::Shape(format!(
            "injector map is {mc}x{md}, hidden width {c}, embedding width {}",
            emb.dim(1)?
        )));
    }
    Ok(emb.matmul(&map.t()?)?)
}

fn project_and_add(h_s: &Tensor, emb: &Tensor, map: &Tensor, batch: usize) -> Result<Tensor> {
    let (rows, f, c) = h_s.dims3()?;
    let proj = projection(emb, map, c)?;
    if rows % batch != 0 || emb.dim(0)? != batch {
        return Err(Error::Shape(format!(
            "{rows} rows and {} embeddings for batch {batch}",
            emb.dim(0)?
        )));
    }
    let proj = proj.reshape((batch, 1, 1, c))?;
    let out = h_s
        .reshape((batch, rows / batch, f, c))?
        .broadcast_add(&proj)?
        .reshape((rows, f, c))?;
    Ok(out)
}

/// Per-sample frame embeddings `[b, d_img]` injected ahead of every temporal transformer.
#[derive(Debug, Clone)]
pub struct Injection<'a> {
    pub embeddings: Tensor,
    pub weights: &'a InjectorWeights,
    pub trainable: bool,
}

impl<'a> Injection<'a> {
    pub fn new(embeddings: Tensor, weights: &'a InjectorWeights, trainable: bool) -> Self {
        Self {
            embeddings,
            weights,
            trainable,
        }
    }

    pub(crate) fn apply(&self, h_s: &Tensor, block: usize, batch: usize) -> Result<Tensor> {
        let map = self.weights.map(block)?;
        let map = if self.trainable {
            map.as_tensor().clone()
        } else {
            map.as_tensor().detach()
        };
        project_and_add(h_s, &self.embeddings, &map, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn emb(v: &[f32]) -> FrameEmbedding {
        FrameEmbedding {
            vector: v.to_vec(),
            source_frame_index: 0,
        }
    }

    #[test]
    fn zero_map_is_noop() {
        let dev = Device::Cpu;
        let w = InjectorWeights::zeros(&[3], 2, &dev).unwrap();
        let h = rng::randn(&mut rng::seeded(0), &[6, 4, 3], &dev).unwrap();
        let out = inject_appearance(&h, &emb(&[0.6, 0.8]), &w, 0).unwrap();
        assert_eq!(out.dims(), h.dims());
        let d = (out - &h)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn zero_embedding_is_noop() {
        let dev = Device::Cpu;
        let mut r = rng::seeded(1);
        let w = InjectorWeights::from_tensors(&[rng::randn(&mut r, &[3, 2], &dev).unwrap()]).unwrap();
        let h = rng::randn(&mut r, &[6, 4, 3], &dev).unwrap();
        let out = inject_appearance(&h, &emb(&[0.0, 0.0]), &w, 0).unwrap();
        let d = (out - &h)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn identity_map_broadcast_example() {
        // c = d_img = 2, W_p = I, emb = [1, -1], h_s = 0: every entry is [1, -1].
        let dev = Device::Cpu;
        let w = InjectorWeights::from_tensors(&[Tensor::eye(2, DType::F32, &dev).unwrap()]).unwrap();
        let h = Tensor::zeros((5, 3, 2), DType::F32, &dev).unwrap();
        let out = inject_appearance(&h, &emb(&[1.0, -1.0]), &w, 0).unwrap();
        for row in out.to_vec3::<f32>().unwrap() {
            for v in row {
                assert_eq!(v, vec![1.0, -1.0]);
            }
        }
    }

    #[test]
    fn missing_block() {
        let w = InjectorWeights::zeros(&[2], 2, &Device::Cpu).unwrap();
        let h = Tensor::zeros((1, 1, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            inject_appearance(&h, &emb(&[1.0, 0.0]), &w, 3),
            Err(Error::MissingBlock(3))
        ));
    }

    #[test]
    fn injected_term_is_frame_constant_and_linear() {
        let dev = Device::Cpu;
        let mut r = rng::seeded(2);
        let w = InjectorWeights::from_tensors(&[rng::randn(&mut r, &[4, 3], &dev).unwrap()]).unwrap();
        let h = rng::randn(&mut r, &[5, 6, 4], &dev).unwrap();
        let e1 = emb(&[0.3, -0.2, 0.9]);
        let e2 = emb(&[-1.0, 0.5, 0.25]);
        let sum = emb(&[-0.7, 0.3, 1.15]);
        let term = injected_term(&h, &e1, &w, 0).unwrap().to_vec3::<f32>().unwrap();
        for row in &term {
            for k in 0..4 {
                let col: Vec<f64> = row.iter().map(|fr| f64::from(fr[k])).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                assert_eq!(var, 0.0);
            }
        }
        let delta = |e: &FrameEmbedding| (inject_appearance(&h, e, &w, 0).unwrap() - &h).unwrap();
        let lin = ((delta(&e1) + delta(&e2)).unwrap() - delta(&sum))
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(lin < 1e-5);
    }
}
