//! Proxy depth: consistent multi-view keyframe depth completed with
//! affine-scaled monocular depth.

use thiserror::Error;

use crate::grid::{DepthMap, Grid};
use crate::tracking::fit_affine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ProxyError {
    /// The depth-space scale/shift fit had no usable regressor.
    #[error("degenerate scale/shift fit")]
    DegenerateFit,
}

/// Origin of each fused depth pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxySource {
    Multiview,
    Mono,
    Invalid,
}

/// Fused per-keyframe depth map.
#[derive(Clone, Debug)]
pub struct ProxyDepth {
    pub depth: DepthMap,
    pub source: Grid<ProxySource>,
}

impl ProxyDepth {
    pub fn valid_depth(&self, x: usize, y: usize) -> Option<f64> {
        match self.source.get(x, y) {
            ProxySource::Invalid => None,
            _ => Some(*self.depth.get(x, y)),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.source
            .as_slice()
            .iter()
            .filter(|s| **s != ProxySource::Invalid)
            .count()
    }
}

/// Inputs to the fusion: per-pixel multi-view depth with its consistency
/// mask, and the monocular depth map.
pub struct FusionInput<'a> {
    pub multiview_depth: &'a DepthMap,
    pub multiview_valid: &'a Grid<bool>,
    pub mono_depth: &'a DepthMap,
}

/// Minimum number of consistent pixels before refitting scale/shift; below
/// this the previous fit for the keyframe is reused.
pub const MIN_FIT_PIXELS: usize = 100;

/// Compose the proxy depth: the multi-view depth where it is consistent,
/// `θ·D_mono + γ` elsewhere, with the depth-space affine fit estimated over
/// the consistent pixels.
///
/// `prior_fit` carries the last successful fit for this keyframe and is
/// refreshed on success. With too few consistent pixels the prior is reused;
/// a keyframe that never fitted falls back to anchoring against all positive
/// multi-view pixels regardless of the mask.
pub fn fuse_proxy_depth(
    input: &FusionInput,
    prior_fit: &mut Option<(f64, f64)>,
) -> Result<ProxyDepth, ProxyError> {
    let d = input.multiview_depth;
    assert!(d.same_size(input.multiview_valid) && d.same_size(input.mono_depth));

    let collect = |use_mask: bool| -> Vec<(f64, f64)> {
        d.pixels()
            .filter(|(x, y, depth)| {
                (!use_mask || *input.multiview_valid.get(*x, *y))
                    && **depth > 0.0
                    && *input.mono_depth.get(*x, *y) > 0.0
            })
            .map(|(x, y, &depth)| (*input.mono_depth.get(x, y), depth))
            .collect()
    };
    let samples = collect(true);

    let fit = if samples.len() >= MIN_FIT_PIXELS || prior_fit.is_none() {
        let attempt =
            fit_affine(samples.iter().map(|&(x, _)| x), samples.iter().map(|&(_, y)| y))
                .or_else(|_| {
                    let unfiltered = collect(false);
                    fit_affine(
                        unfiltered.iter().map(|&(x, _)| x),
                        unfiltered.iter().map(|&(_, y)| y),
                    )
                });
        match attempt {
            Ok(f) => {
                *prior_fit = Some(f);
                f
            }
            Err(_) => prior_fit.ok_or(ProxyError::DegenerateFit)?,
        }
    } else {
        prior_fit.expect("checked above")
    };
    let (theta, gamma) = fit;

    let mut depth = Grid::filled(d.width(), d.height(), 0.0);
    let mut source = Grid::filled(d.width(), d.height(), ProxySource::Invalid);
    for (x, y, &mv) in d.pixels() {
        if *input.multiview_valid.get(x, y) && mv > 0.0 {
            *depth.get_mut(x, y) = mv;
            *source.get_mut(x, y) = ProxySource::Multiview;
        } else {
            let fused = theta * input.mono_depth.get(x, y) + gamma;
            if fused > 0.0 {
                *depth.get_mut(x, y) = fused;
                *source.get_mut(x, y) = ProxySource::Mono;
            }
        }
    }
    Ok(ProxyDepth { depth, source })
}
