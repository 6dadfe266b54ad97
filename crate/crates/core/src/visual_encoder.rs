//! Trainable convolutional backbone and RoI-Align region pooling.
//!
//! The backbone is two 3×3 stride-2 convolutions with ReLU, an overall stride
//! of 4. Region features are RoI-Align pools over the final feature map,
//! flattened channel-major to `C_f·P·P` values.

use crate::autograd::{Graph, NodeId, RoiBox};
use crate::config::ModelConfig;
use crate::corpus::{BoundingBox, RasterImage};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub pooled: usize,
    stride: usize,
}

/// Names of backbone tensors all start with this prefix.
pub const BACKBONE_PREFIX: &str = "backbone.";

impl Backbone {
    pub fn register(init: &mut Initializer, store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let mut conv = |name: &str, cin: usize, cout: usize| {
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            ConvParams {
                weight: store.insert(
                    &format!("{BACKBONE_PREFIX}{name}.weight"),
                    init.uniform(vec![cout, cin, 3, 3], bound),
                ),
                bias: store.insert(
                    &format!("{BACKBONE_PREFIX}{name}.bias"),
                    init.uniform(vec![cout], bound),
                ),
            }
        };
        let conv1 = conv("conv1", 1, cfg.conv1_channels);
        let conv2 = conv("conv2", cfg.conv1_channels, cfg.conv2_channels);
        Self {
            conv1,
            conv2,
            pooled: cfg.pooled,
            stride: cfg.stride(),
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Feature map `[C_f, ceil(H/4), ceil(W/4)]` of a page.
    pub fn conv_forward(&self, g: &mut Graph, store: &ParamStore, image: &RasterImage) -> NodeId {
        let x = g.constant(image_tensor(image));
        let mut h = x;
        for conv in [self.conv1, self.conv2] {
            let w = g.param(store, conv.weight);
            let b = g.param(store, conv.bias);
            let c = g.conv2d(h, w, b, 2, 1);
            h = g.relu(c);
        }
        h
    }

    /// Per-region RoI features `[N, d_v]` and the whole-page feature `[1, d_v]`.
    pub fn extract_region_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &RasterImage,
        boxes: &[BoundingBox],
    ) -> Result<(NodeId, NodeId)> {
        let fmap = self.conv_forward(g, store, image);
        let mut all = boxes.to_vec();
        all.push(BoundingBox::full_page(image.width(), image.height()));
        let pooled = roi_align(g, fmap, &all, self.stride, self.pooled, image.width(), image.height())?;
        let n = boxes.len();
        let v = g.slice_rows(pooled, 0, n);
        let page = g.slice_rows(pooled, n, 1);
        Ok((v, page))
    }
}

/// `[1, H, W]` intensities of a page.
pub fn image_tensor(image: &RasterImage) -> Tensor {
    Tensor::new(
        vec![1, image.height() as usize, image.width() as usize],
        image.intensities(),
    )
}

/// RoI-Align of pixel boxes over a feature map with the given stride.
///
/// Boxes are mapped to continuous feature coordinates by dividing by the
/// stride; sub-cell boxes are valid.
pub fn roi_align(
    g: &mut Graph,
    fmap: NodeId,
    boxes: &[BoundingBox],
    stride: usize,
    pooled: usize,
    width: u32,
    height: u32,
) -> Result<NodeId> {
    let scale = 1.0 / stride as f64;
    let mut rois: Vec<RoiBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if !b.within(width, height) {
            return Err(Error::InvalidInput(format!(
                "RoI {b:?} outside {width}x{height} page"
            )));
        }
        rois.push([
            f64::from(b.x_lt) * scale,
            f64::from(b.y_lt) * scale,
            f64::from(b.x_rb) * scale,
            f64::from(b.y_rb) * scale,
        ]);
    }
    Ok(g.roi_align(fmap, &rois, pooled))
}
