use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, rng_normal, Matrix, Real, Rng};

/// SwiGLU fast-weight MLP: `y = (silu(x·w1) ⊙ (x·w3)) · w2`.
///
/// The same type carries gradients, which have identical shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct FastWeights<T: Real = f64> {
    /// gate, `d x m`
    pub w1: Matrix<T>,
    /// up, `d x m`
    pub w3: Matrix<T>,
    /// down, `m x d`
    pub w2: Matrix<T>,
}

pub type FastGrad<T = f64> = FastWeights<T>;

impl<T: Real> FastWeights<T> {
    pub fn new(w1: Matrix<T>, w3: Matrix<T>, w2: Matrix<T>) -> Result<Self> {
        let fw = Self { w1, w3, w2 };
        fw.validate()?;
        Ok(fw)
    }

    /// Gaussian initialization scaled by `1/sqrt(d)`, hidden width
    /// `expansion · d`.
    pub fn seeded(d: usize, expansion: usize, rng: &mut Rng) -> Self {
        let m = expansion * d;
        let s = T::lit(1.0 / (d as f64).sqrt());
        Self {
            w1: rng_normal::<T>(rng, d, m).scale(s),
            w3: rng_normal::<T>(rng, d, m).scale(s),
            w2: rng_normal::<T>(rng, m, d).scale(s),
        }
    }

    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, m),
            w3: Matrix::zeros(d, m),
            w2: Matrix::zeros(m, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = self.w1.shape();
        if self.w3.shape() != (d, m) || self.w2.shape() != (m, d) {
            return Err(Error::shape(
                "FastWeights",
                format!(
                    "w1 {:?}, w3 {:?}, w2 {:?}",
                    self.w1.shape(),
                    self.w3.shape(),
                    self.w2.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn matrices(&self) -> [&Matrix<T>; 3] {
        [&self.w1, &self.w3, &self.w2]
    }

    /// Total scalar count; the per-step synchronization payload.
    pub fn numel(&self) -> usize {
        self.matrices().iter().map(|m| m.data().len()).sum()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            w1: self.w1.add(&other.w1)?,
            w3: self.w3.add(&other.w3)?,
            w2: self.w2.add(&other.w2)?,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.w1.axpy(T::one(), &other.w1)?;
        self.w3.axpy(T::one(), &other.w3)?;
        self.w2.axpy(T::one(), &other.w2)
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            w1: self.w1.scale(s),
            w3: self.w3.scale(s),
            w2: self.w2.scale(s),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    /// Largest per-matrix max-norm relative deviation from `reference`.
    pub fn max_rel_diff(&self, reference: &Self) -> Result<f64> {
        let mut worst = 0.0f64;
        for (a, b) in self.matrices().iter().zip(reference.matrices()) {
            worst = worst.max(a.max_rel_diff(b)?);
        }
        Ok(worst)
    }

    pub fn cast<U: Real>(&self) -> FastWeights<U> {
        FastWeights {
            w1: self.w1.cast(),
            w3: self.w3.cast(),
            w2: self.w2.cast(),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
pub(crate) fn silu<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

/// `σ(z)·(1 + z·(1 − σ(z)))`
#[inline]
pub(crate) fn silu_prime<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

struct Activations<T: Real> {
    pre_gate: Matrix<T>,
    gate: Matrix<T>,
    up: Matrix<T>,
    hidden: Matrix<T>,
}

fn activations<T: Real>(theta: &FastWeights<T>, x: &Matrix<T>) -> Result<Activations<T>> {
    theta.validate()?;
    if x.cols() != theta.dim() {
        return Err(Error::shape(
            "fast_forward",
            format!("input has {} columns, fast weights expect {}", x.cols(), theta.dim()),
        ));
    }
    let pre_gate = matmul(x, &theta.w1)?;
    let up = matmul(x, &theta.w3)?;
    let gate = pre_gate.map(silu);
    let hidden = gate.hadamard(&up)?;
    Ok(Activations {
        pre_gate,
        gate,
        up,
        hidden,
    })
}

pub fn fast_forward<T: Real>(theta: &FastWeights<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let act = activations(theta, x)?;
    matmul(&act.hidden, &theta.w2)
}

impl std::str::FromStr for InnerLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_dot" => Ok(Self::NegDot),
            "residual" => Ok(Self::Residual),
            other => Err(Error::Config(format!("unknown inner loss `{other}`"))),
        }
    }
}

/// Inner objective fitted at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InnerLoss {
    /// `−Σᵢ T(kᵢ)ᵀ v′ᵢ`; minimizing maximizes alignment.
    #[default]
    NegDot,
    /// `½ Σᵢ ‖T(kᵢ) − v′ᵢ‖²`
    Residual,
}

impl InnerLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            InnerLoss::NegDot => "neg_dot",
            InnerLoss::Residual => "residual",
        }
    }

    pub fn loss<T: Real>(self, theta: &FastWeights<T>, k: &Matrix<T>, vp: &Matrix<T>) -> Result<T> {
        check_pair(theta, k, vp)?;
        let y = fast_forward(theta, k)?;
        let mut acc = T::zero();
        match self {
            InnerLoss::NegDot => {
                for (&a, &b) in y.data().iter().zip(vp.data()) {
                    acc += a * b;
                }
                Ok(-acc)
            }
            InnerLoss::Residual => {
                for (&a, &b) in y.data().iter().zip(vp.data()) {
                    acc += (a - b) * (a - b);
                }
                Ok(acc * T::lit(0.5))
            }
        }
    }

    /// Analytic gradient with respect to `w1`, `w3`, `w2`.
    pub fn grad<T: Real>(
        self,
        theta: &FastWeights<T>,
        k: &Matrix<T>,
        vp: &Matrix<T>,
    ) -> Result<FastGrad<T>> {
        check_pair(theta, k, vp)?;
        let act = activations(theta, k)?;
        let g_out = match self {
            InnerLoss::NegDot => vp.scale(-T::one()),
            InnerLoss::Residual => matmul(&act.hidden, &theta.w2)?.sub(vp)?,
        };
        let w2 = matmul_tn(&act.hidden, &g_out)?;
        let d_hidden = matmul_nt(&g_out, &theta.w2)?;
        let d_up = d_hidden.hadamard(&act.gate)?;
        let d_pre = d_hidden
            .hadamard(&act.up)?
            .hadamard(&act.pre_gate.map(silu_prime))?;
        Ok(FastWeights {
            w1: matmul_tn(k, &d_pre)?,
            w3: matmul_tn(k, &d_up)?,
            w2,
        })
    }
}

fn check_pair<T: Real>(theta: &FastWeights<T>, k: &Matrix<T>, vp: &Matrix<T>) -> Result<()> {
    if k.rows() != vp.rows() || vp.cols() != theta.dim() || k.cols() != theta.dim() {
        return Err(Error::shape(
            "inner loss",
            format!(
                "K {:?}, V' {:?}, fast weights dim {}",
                k.shape(),
                vp.shape(),
                theta.dim()
            ),
        ));
    }
    Ok(())
}

/// Negative dot-product inner loss.
pub fn inner_loss<T: Real>(theta: &FastWeights<T>, k: &Matrix<T>, vp: &Matrix<T>) -> Result<T> {
    InnerLoss::NegDot.loss(theta, k, vp)
}

/// Gradient of [`inner_loss`].
pub fn inner_grad<T: Real>(
    theta: &FastWeights<T>,
    k: &Matrix<T>,
    vp: &Matrix<T>,
) -> Result<FastGrad<T>> {
    InnerLoss::NegDot.grad(theta, k, vp)
}
