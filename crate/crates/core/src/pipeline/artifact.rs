use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tasks::Split;

/// A λ value as it appears in artifact names: canonical decimal with at least
/// one fractional digit (`0.0`, `0.3`, `1.25`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambda(f64);

impl Lambda {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::invalid(format!("λ must be finite and ≥ 0, got {value}")));
        }
        // Collapse -0.0 so names stay canonical.
        Ok(Self(value + 0.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Display is the shortest round-tripping form and never uses exponents.
        let s = self.0.to_string();
        if s.contains('.') {
            f.write_str(&s)
        } else {
            write!(f, "{s}.0")
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ok = !s.is_empty()
            && s.chars().all(|c| c.is_ascii_digit() || c == '.')
            && s.chars().filter(|&c| c == '.').count() <= 1;
        if !ok {
            return Err(Error::invalid(format!("`{s}` is not a decimal λ")));
        }
        let v: f64 = s.parse().map_err(|_| Error::invalid(format!("`{s}` is not a decimal λ")))?;
        Lambda::new(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ArtifactName {
    /// Pre-trained teacher checkpoint.
    Teacher,
    /// Pre-trained proxy checkpoint the defender differentiates.
    Proxy,
    /// Pre-trained student checkpoint the attacker starts from.
    StudentBase,
    TeacherTraces { lambda: Lambda, split: Split },
    StudentGrad,
    Student { lambda: Lambda },
    StudentTest { lambda: Lambda },
    StudentBaseTest,
}

impl ArtifactName {
    pub fn teacher_traces(lambda: f64, split: Split) -> Result<Self> {
        Ok(Self::TeacherTraces {
            lambda: Lambda::new(lambda)?,
            split,
        })
    }

    pub fn student(lambda: f64) -> Result<Self> {
        Ok(Self::Student {
            lambda: Lambda::new(lambda)?,
        })
    }

    pub fn student_test(lambda: f64) -> Result<Self> {
        Ok(Self::StudentTest {
            lambda: Lambda::new(lambda)?,
        })
    }

    pub fn is_checkpoint(&self) -> bool {
        matches!(self, Self::Teacher | Self::Proxy | Self::StudentBase)
    }

    /// Direct dependencies, in build order.
    pub fn dependencies(&self) -> Vec<ArtifactName> {
        let zero = Lambda(0.0);
        match *self {
            Self::Teacher | Self::Proxy | Self::StudentBase => vec![],
            Self::TeacherTraces { lambda, .. } if lambda.is_zero() => vec![Self::Teacher],
            Self::TeacherTraces { .. } => vec![Self::Teacher, Self::StudentGrad],
            Self::StudentGrad => vec![
                Self::TeacherTraces {
                    lambda: zero,
                    split: Split::Holdout,
                },
                Self::Proxy,
            ],
            Self::Student { lambda } => vec![
                Self::TeacherTraces {
                    lambda,
                    split: Split::Train,
                },
                Self::TeacherTraces {
                    lambda: zero,
                    split: Split::Holdout,
                },
                Self::StudentBase,
            ],
            Self::StudentTest { lambda } => vec![
                Self::Student { lambda },
                Self::TeacherTraces {
                    lambda,
                    split: Split::Test,
                },
                Self::StudentBaseTest,
            ],
            Self::StudentBaseTest => vec![Self::StudentBase],
        }
    }
}

impl fmt::Display for ArtifactName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Teacher => write!(f, "teacher"),
            Self::Proxy => write!(f, "proxy"),
            Self::StudentBase => write!(f, "student_base"),
            Self::TeacherTraces { lambda, split } => write!(f, "teacher_lambda={lambda}_{}", split.as_str()),
            Self::StudentGrad => write!(f, "student_grad"),
            Self::Student { lambda } => write!(f, "student_lambda={lambda}"),
            Self::StudentTest { lambda } => write!(f, "student_lambda={lambda}_test"),
            Self::StudentBaseTest => write!(f, "student_base_test"),
        }
    }
}

impl FromStr for ArtifactName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown artifact name `{s}`"));
        match s {
            "teacher" => return Ok(Self::Teacher),
            "proxy" => return Ok(Self::Proxy),
            "student_base" => return Ok(Self::StudentBase),
            "student_grad" => return Ok(Self::StudentGrad),
            "student_base_test" => return Ok(Self::StudentBaseTest),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("teacher_lambda=") {
            let (x, split) = rest.rsplit_once('_').ok_or_else(bad)?;
            return Ok(Self::TeacherTraces {
                lambda: x.parse()?,
                split: Split::parse(split)?,
            });
        }
        if let Some(rest) = s.strip_prefix("student_lambda=") {
            if let Some(x) = rest.strip_suffix("_test") {
                return Ok(Self::StudentTest { lambda: x.parse()? });
            }
            return Ok(Self::Student { lambda: rest.parse()? });
        }
        Err(bad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn names_parse_and_print() {
        for s in [
            "teacher",
            "proxy",
            "student_base",
            "student_grad",
            "student_base_test",
            "teacher_lambda=0.0_train",
            "teacher_lambda=0.3_holdout",
            "teacher_lambda=12.5_test",
            "student_lambda=0.1",
            "student_lambda=0.1_test",
        ] {
            assert_eq!(s.parse::<ArtifactName>().unwrap().to_string(), s);
        }
        assert_eq!("teacher_lambda=0_train".parse::<ArtifactName>().unwrap().to_string(), "teacher_lambda=0.0_train");
        for bad in ["", "teacher_lambda=x_train", "teacher_lambda=0.1_dev", "student_lambda=-1", "student_lambda=1e3", "students"] {
            assert!(bad.parse::<ArtifactName>().is_err(), "{bad}");
        }
    }

    #[test]
    fn perturbed_traces_need_the_gradient() {
        let clean = ArtifactName::teacher_traces(0.0, Split::Train).unwrap();
        assert_eq!(clean.dependencies(), vec![ArtifactName::Teacher]);
        let poisoned = ArtifactName::teacher_traces(0.5, Split::Test).unwrap();
        assert!(poisoned.dependencies().contains(&ArtifactName::StudentGrad));
    }

    proptest! {
        #[test]
        fn lambda_names_roundtrip(x in 0.0f64..100.0, which in 0usize..3) {
            let name = match which {
                0 => ArtifactName::student(x).unwrap(),
                1 => ArtifactName::student_test(x).unwrap(),
                _ => ArtifactName::teacher_traces(x, Split::Holdout).unwrap(),
            };
            let back: ArtifactName = name.to_string().parse().unwrap();
            prop_assert_eq!(back, name);
        }
    }
}
