//! Closed-form image formation: the matting model `I = J·α + B·(1 − α')` with
//! Beer–Lambert transmittances, its haze / low-light specialisations, and the
//! downwelling colour law for scattered sunlight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Spectrum;

/// Imaging condition; selects the loss preset and the renderer path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Haze,
    Underwater,
    Lowlight,
}

impl Condition {
    pub fn has_scattering(self) -> bool {
        !matches!(self, Condition::Lowlight)
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haze" => Ok(Condition::Haze),
            "underwater" => Ok(Condition::Underwater),
            "lowlight" => Ok(Condition::Lowlight),
            other => Err(Error::Config(format!("unknown condition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub j: Spectrum,
    pub b: Spectrum,
    pub sigma_attn: Spectrum,
    pub sigma_scat: Spectrum,
    pub z: f64,
    pub condition: Condition,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma_attn.is_valid_radiance() || !self.sigma_scat.is_valid_radiance() {
            return Err(Error::Config("medium coefficients must be finite and >= 0".into()));
        }
        if !(self.z >= 0.0 && self.z.is_finite()) {
            return Err(Error::Config(format!("distance must be >= 0, got {}", self.z)));
        }
        match self.condition {
            Condition::Haze if self.sigma_attn != self.sigma_scat => Err(Error::Config(
                "haze requires equal attenuation and scattering coefficients".into(),
            )),
            Condition::Lowlight if self.b != Spectrum::ZERO => {
                Err(Error::Config("low-light requires zero ambient colour".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownwellingParams {
    pub phi: Spectrum,
    pub z_phi: f64,
}

/// Observed colour for a single line of sight.
pub fn compose(spec: &DegradationSpec) -> Spectrum {
    let z = spec.z;
    let mut out = Spectrum::ZERO;
    for c in 0..3 {
        let direct = (-spec.sigma_attn[c] * z).exp();
        let veil = -(-spec.sigma_scat[c] * z).exp_m1();
        out[c] = spec.j[c] * direct + spec.b[c] * veil;
    }
    out
}

/// Recovers `J` from an observation when the medium is known.
pub fn decompose_given_medium(
    i: Spectrum,
    b: Spectrum,
    sigma_attn: Spectrum,
    sigma_scat: Spectrum,
    z: f64,
) -> Result<Spectrum> {
    let mut out = Spectrum::ZERO;
    for c in 0..3 {
        let transmittance = (-sigma_attn[c] * z).exp();
        if transmittance <= 1e-12 {
            return Err(Error::IllConditioned {
                channel: c,
                transmittance,
            });
        }
        let veil = -(-sigma_scat[c] * z).exp_m1();
        out[c] = (i[c] - b[c] * veil) / transmittance;
    }
    Ok(out)
}

/// Single-scattering haze model with one shared coefficient.
pub fn asm_haze(j: Spectrum, b_inf: Spectrum, sigma: Spectrum, z: f64) -> Spectrum {
    compose(&DegradationSpec {
        j,
        b: b_inf,
        sigma_attn: sigma,
        sigma_scat: sigma,
        z,
        condition: Condition::Haze,
    })
}

/// Low-light attenuation `I = K·J`; returns `(I, K)`.
pub fn lowlight_scale(j: Spectrum, sigma_attn: Spectrum, z: f64) -> (Spectrum, Spectrum) {
    let i = compose(&DegradationSpec {
        j,
        b: Spectrum::ZERO,
        sigma_attn,
        sigma_scat: Spectrum::ZERO,
        z,
        condition: Condition::Lowlight,
    });
    let k = sigma_attn.map(|s| (-s * z).exp());
    (i, k)
}

/// Colour of sunlight reaching depth `z_phi` below the surface (overhead sun).
pub fn downwelling_color(p: &DownwellingParams, sigma_attn: Spectrum, sigma_scat: Spectrum) -> Spectrum {
    let mut out = Spectrum::ZERO;
    for c in 0..3 {
        out[c] = p.phi[c] * (-(sigma_attn[c] + sigma_scat[c]) * p.z_phi).exp();
    }
    out
}
