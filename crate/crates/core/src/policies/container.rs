use std::path::Path;

use serde::{Deserialize, Serialize};

use super::online::OnlinePolicy;
use super::reference::{EnsemblePolicy, MleReg, RefPolicy};
use crate::diffcore::MlpParams;
use crate::error::{Error, Result};
use crate::gp::{GpPosterior, GpRecord};

const FORMAT: &str = "klprior-policy";
const VERSION: u32 = 1;

/// Any serializable policy.
#[derive(Clone, Debug)]
pub enum AnyPolicy {
    Online(OnlinePolicy),
    Reference(RefPolicy),
}

impl AnyPolicy {
    pub fn variant(&self) -> &'static str {
        match self {
            AnyPolicy::Online(_) => "online",
            AnyPolicy::Reference(r) => r.variant(),
        }
    }

    pub fn into_online(self) -> Result<OnlinePolicy> {
        match self {
            AnyPolicy::Online(p) => Ok(p),
            other => Err(Error::Domain(format!("expected an online policy, found {}", other.variant()))),
        }
    }

    pub fn into_reference(self) -> Result<RefPolicy> {
        match self {
            AnyPolicy::Reference(r) => Ok(r),
            AnyPolicy::Online(_) => Err(Error::Domain("expected a reference policy, found online".into())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Container {
            format: FORMAT.into(),
            version: VERSION,
            policy: Record::from_policy(self)?,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Container = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::Domain(format!("unexpected policy format {:?}", doc.format)));
        }
        if doc.version != VERSION {
            return Err(Error::Domain(format!("unsupported policy version {}", doc.version)));
        }
        doc.policy.into_policy()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl From<OnlinePolicy> for AnyPolicy {
    fn from(p: OnlinePolicy) -> Self {
        AnyPolicy::Online(p)
    }
}

impl From<RefPolicy> for AnyPolicy {
    fn from(r: RefPolicy) -> Self {
        AnyPolicy::Reference(r)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    version: u32,
    policy: Record,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
enum Record {
    Online(OnlinePolicy),
    Gp {
        gp: GpRecord,
    },
    MleGaussian {
        net: MlpParams,
    },
    MleEntropy {
        net: MlpParams,
        beta: f64,
    },
    MleTikhonov {
        net: MlpParams,
        lambda: f64,
    },
    Ensemble(EnsemblePolicy),
    Laplace {
        net: MlpParams,
    },
    ConstantVariance {
        variance: f64,
        mean: Box<Record>,
    },
}

impl Record {
    fn from_policy(p: &AnyPolicy) -> Result<Self> {
        match p {
            AnyPolicy::Online(o) => Ok(Record::Online(o.clone())),
            AnyPolicy::Reference(r) => Record::from_ref(r),
        }
    }

    fn from_ref(r: &RefPolicy) -> Result<Self> {
        Ok(match r {
            RefPolicy::Gp(gp) => Record::Gp {
                gp: GpRecord::from(gp),
            },
            RefPolicy::Mle { net, reg } => match *reg {
                MleReg::None => Record::MleGaussian { net: net.clone() },
                MleReg::Entropy { beta } => Record::MleEntropy { net: net.clone(), beta },
                MleReg::Tikhonov { lambda } => Record::MleTikhonov { net: net.clone(), lambda },
            },
            RefPolicy::Ensemble(e) => Record::Ensemble(e.clone()),
            RefPolicy::Laplace { net } => Record::Laplace { net: net.clone() },
            RefPolicy::ConstantVariance { mean, variance } => Record::ConstantVariance {
                variance: *variance,
                mean: Box::new(Record::from_ref(mean)?),
            },
        })
    }

    fn into_policy(self) -> Result<AnyPolicy> {
        Ok(match self {
            Record::Online(o) => AnyPolicy::Online(o),
            other => AnyPolicy::Reference(other.into_ref()?),
        })
    }

    fn into_ref(self) -> Result<RefPolicy> {
        Ok(match self {
            Record::Online(_) => {
                return Err(Error::Domain("an online policy cannot act as a reference mean".into()))
            }
            Record::Gp { gp } => RefPolicy::Gp(GpPosterior::try_from(gp)?),
            Record::MleGaussian { net } => RefPolicy::Mle { net, reg: MleReg::None },
            Record::MleEntropy { net, beta } => RefPolicy::Mle { net, reg: MleReg::Entropy { beta } },
            Record::MleTikhonov { net, lambda } => RefPolicy::Mle { net, reg: MleReg::Tikhonov { lambda } },
            Record::Ensemble(e) => RefPolicy::Ensemble(EnsemblePolicy::new(e.members().to_vec(), e.source())?),
            Record::Laplace { net } => RefPolicy::Laplace { net },
            Record::ConstantVariance { variance, mean } => RefPolicy::constant_variance(mean.into_ref()?, variance)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{KernelKind, KernelSpec};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_round_trips_reproduce_densities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpParams::new(&[2, 5, 2], &mut rng).unwrap();
        let s = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.5, -0.3, -0.8, 0.9]);
        let a = DMatrix::from_row_slice(3, 1, &[0.2, -0.4, 0.6]);
        let kern = KernelSpec::new(KernelKind::Matern52, vec![0.7, 0.4], 0.6, 1e-3).unwrap();
        let gp = GpPosterior::condition(vec![kern], &s, &a).unwrap();
        let refs = vec![
            RefPolicy::Gp(gp.clone()),
            RefPolicy::Mle { net: net.clone(), reg: MleReg::Entropy { beta: 0.1 } },
            RefPolicy::Laplace { net: net.clone() },
            RefPolicy::constant_variance(RefPolicy::Gp(gp), 5e-3).unwrap(),
        ];
        for r in refs {
            let text = AnyPolicy::from(r.clone()).to_json().unwrap();
            let back = AnyPolicy::from_json(&text).unwrap().into_reference().unwrap();
            assert_eq!(back.variant(), r.variant());
            let (x, y) = (r.log_density(&[0.3, 0.2], &[0.1]).unwrap(), back.log_density(&[0.3, 0.2], &[0.1]).unwrap());
            assert!(((x - y) / x).abs() < 1e-12, "{}", r.variant());
        }
    }

    #[test]
    fn online_round_trip_and_wrong_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = OnlinePolicy::new(2, vec![0.0], vec![1.0], &[4], true, &mut rng).unwrap();
        let back = AnyPolicy::from_json(&AnyPolicy::from(p.clone()).to_json().unwrap()).unwrap();
        assert_eq!(back.variant(), "online");
        assert!(back.clone().into_reference().is_err());
        assert_eq!(back.into_online().unwrap(), p);
    }

    #[test]
    fn rejects_foreign_format() {
        let text = r#"{"format":"other","version":1,"policy":{"variant":"laplace","net":{"widths":[1,2],"layers":[]}}}"#;
        assert!(AnyPolicy::from_json(text).is_err());
    }
}
