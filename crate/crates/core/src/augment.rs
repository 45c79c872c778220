//! SpecAugment: time warping, frequency masking, time masking.
//!
//! Every op takes an explicit rng and is a pure function of (input, policy,
//! rng state), so a fixed seed replays bit-exactly. Draw order is part of the
//! contract: the warp draws (anchor, shift), then each mask draws (width,
//! start). [`augment`] applies warp, then frequency masks, then time masks.

use rand::Rng;

use crate::dsp::Spectrogram;

/// Masking/warping strengths. Mask widths are drawn uniformly from
/// `0..=max`; maxes wider than the spectrogram are clamped at use.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub freq_mask_max: usize,
    pub freq_masks: usize,
    pub time_mask_max: usize,
    pub time_masks: usize,
    pub time_warp_w: usize,
    /// Value written into masked cells; 0 matches the mean of a
    /// mean-centered spectrogram.
    pub mask_value: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            freq_mask_max: 27,
            freq_masks: 2,
            time_mask_max: 25,
            time_masks: 2,
            time_warp_w: 5,
            mask_value: 0.0,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..AugmentPolicy::default()
        }
    }

    /// Default strengths scaled down for small spectrograms: time masks stay
    /// at or below T/8 and frequency masks never exceed F.
    pub fn default_for(t: usize, f: usize) -> Self {
        let d = AugmentPolicy::default();
        AugmentPolicy {
            freq_mask_max: d.freq_mask_max.min(f),
            time_mask_max: d.time_mask_max.min((t / 8).max(1)),
            ..d
        }
    }
}

/// Sets `freq_masks` random column bands to `mask_value`.
pub fn freq_mask<R: Rng>(spec: &Spectrogram, policy: &AugmentPolicy, rng: &mut R) -> Spectrogram {
    let mut out = spec.clone();
    let f = spec.bands();
    let max = policy.freq_mask_max.min(f);
    for _ in 0..policy.freq_masks {
        let width = rng.gen_range(0..=max);
        let start = rng.gen_range(0..=f - width);
        if width == 0 {
            continue;
        }
        for frame in 0..spec.frames() {
            out.values_mut()[frame * f + start..][..width].fill(policy.mask_value);
        }
    }
    out
}

/// Sets `time_masks` random frame bands to `mask_value`.
pub fn time_mask<R: Rng>(spec: &Spectrogram, policy: &AugmentPolicy, rng: &mut R) -> Spectrogram {
    let mut out = spec.clone();
    let (t, f) = (spec.frames(), spec.bands());
    let max = policy.time_mask_max.min(t);
    for _ in 0..policy.time_masks {
        let width = rng.gen_range(0..=max);
        let start = rng.gen_range(0..=t - width);
        if width == 0 {
            continue;
        }
        out.values_mut()[start * f..][..width * f].fill(policy.mask_value);
    }
    out
}

/// Piecewise-linear remap of the time axis: endpoints stay fixed, a random
/// anchor `t0` moves by a random shift within `±time_warp_w`, and frames are
/// linearly interpolated. Skipped (identity) when `T <= 2*time_warp_w`.
pub fn time_warp<R: Rng>(spec: &Spectrogram, policy: &AugmentPolicy, rng: &mut R) -> Spectrogram {
    let (t, f) = (spec.frames(), spec.bands());
    let w = policy.time_warp_w;
    if w == 0 {
        return spec.clone();
    }
    if t <= 2 * w {
        log::debug!("time_warp skipped: {t} frames is too short for warp width {w}");
        return spec.clone();
    }
    let anchor = rng.gen_range(w..t - w);
    let shift = rng.gen_range(-(w as i64)..=w as i64);
    let target = (anchor as i64 + shift).clamp(1, t as i64 - 2) as usize;
    warp_to(spec, anchor, target, t, f)
}

fn warp_to(spec: &Spectrogram, anchor: usize, target: usize, t: usize, f: usize) -> Spectrogram {
    let mut out = spec.clone();
    for j in 0..t {
        let src = if j <= target {
            j as f64 * anchor as f64 / target as f64
        } else {
            anchor as f64
                + (j - target) as f64 * (t - 1 - anchor) as f64 / (t - 1 - target) as f64
        };
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = (src - lo as f64) as f32;
        let row = &mut out.values_mut()[j * f..][..f];
        for (k, v) in row.iter_mut().enumerate() {
            *v = spec.frame(lo)[k] * (1.0 - frac) + spec.frame(hi)[k] * frac;
        }
    }
    out
}

/// Full pipeline: warp, then frequency masks, then time masks. Identity when
/// the policy is disabled.
pub fn augment<R: Rng>(spec: &Spectrogram, policy: &AugmentPolicy, rng: &mut R) -> Spectrogram {
    if !policy.enabled {
        return spec.clone();
    }
    let warped = time_warp(spec, policy, rng);
    let fmasked = freq_mask(&warped, policy, rng);
    time_mask(&fmasked, policy, rng)
}
