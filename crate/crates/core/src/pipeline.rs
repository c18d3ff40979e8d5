//! Full generator path: embeddings, mapper, generator, cartooniser.

use candle_core::Tensor;

use crate::backbone::Backbones;
use crate::domain::{ImageTensor, LatentW};
use crate::error::{Error, Result};
use crate::mapper::Mapper;

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub w: LatentW,
    /// Generator output before cartoonisation.
    pub raw: ImageTensor,
    pub out: ImageTensor,
}

fn check_resolution(b: &Backbones, what: &str, img: &ImageTensor) -> Result<()> {
    if img.resolution() != b.resolution() {
        return Err(Error::Dimension(format!(
            "{what} image is {0}x{0}, pipeline runs at {1}x{1}",
            img.resolution(),
            b.resolution()
        )));
    }
    Ok(())
}

/// `(N, 3, R, R)` identity and pose batches to `(N, 512)` latents. With
/// `train_mode` the result is attached to the mapper and pose tail.
pub fn latent_batch(b: &Backbones, mapper: &Mapper, id: &Tensor, pose: &Tensor, train_mode: bool) -> Result<Tensor> {
    let e_id = b.identity.forward(id)?.detach();
    let e_p = b.pose.forward(pose, train_mode)?;
    mapper.forward(&mapper.fuse_batch(&e_p, &e_id)?)
}

/// `(N, 512)` to `(raw, cartoon)` image batches.
pub fn render_batch(b: &Backbones, w: &Tensor) -> Result<(Tensor, Tensor)> {
    let raw = b.synthesis.forward(w)?;
    let out = b.cartooniser.forward(&raw)?;
    Ok((raw, out))
}

pub fn synthesize(b: &Backbones, mapper: &Mapper, id_img: &ImageTensor, pose_img: &ImageTensor) -> Result<Synthesized> {
    check_resolution(b, "identity", id_img)?;
    check_resolution(b, "pose", pose_img)?;
    if mapper.dtype() != b.dtype() {
        return Err(Error::Parameter(format!(
            "mapper precision {:?} differs from backend {:?}",
            mapper.dtype(),
            b.dtype()
        )));
    }
    let id = id_img.tensor().to_dtype(b.dtype())?.unsqueeze(0)?;
    let pose = pose_img.tensor().to_dtype(b.dtype())?.unsqueeze(0)?;
    let w = latent_batch(b, mapper, &id, &pose, false)?.detach();
    let w = LatentW::from_tensor_row(&w, 0)?;
    let raw = b.synthesis.generate(&w)?;
    let out = b.cartooniser.cartoonise(&raw)?;
    Ok(Synthesized { w, raw, out })
}

/// `C(G(w))`.
pub fn infer_from_w(b: &Backbones, w: &LatentW) -> Result<ImageTensor> {
    b.cartooniser.cartoonise(&b.synthesis.generate(w)?)
}
