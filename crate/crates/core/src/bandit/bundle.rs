//! `TBX1` model bundle: frozen extractor, PCA models and arm statistics.
//!
//! Little-endian throughout:
//!
//! ```text
//! "TBX1" u32 version
//! u32 layers   { u32 rows, u32 cols, f32 weights[rows*cols], f32 biases[rows] }
//! u32 pcas     { u32 D, u32 d, u8 rank_deficient, f64 mean[D], f64 components[D*d], f64 variance[d] }
//! f64 lambda0
//! u32 actions  { u32 density, u32 d_u, f64 A[d_u*d_u], f64 b[d_u] }
//! ```

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use super::{ArmState, BanditError, BanditState, Extractor, FrozenLayer};
use crate::features::PcaModel;

pub const BUNDLE_MAGIC: &[u8; 4] = b"TBX1";
pub const BUNDLE_VERSION: u32 = 1;

// Upper bound on any single dimension read from a file.
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub extractor: Extractor,
    /// Text projection first, then vision.
    pub pcas: Vec<PcaModel>,
    pub state: BanditState,
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: usize) -> std::io::Result<()> {
        let v = u32::try_from(v).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
        self.0.write_all(&v.to_le_bytes())
    }
    fn f32s(&mut self, v: &[f32]) -> std::io::Result<()> {
        v.iter()
            .try_for_each(|x| self.0.write_all(&x.to_le_bytes()))
    }
    fn f64s<'a>(&mut self, v: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
        v.into_iter()
            .try_for_each(|x| self.0.write_all(&x.to_le_bytes()))
    }
}

pub fn write_bundle(bundle: &ModelBundle, w: impl Write) -> Result<(), BanditError> {
    let mut o = Out(w);
    o.0.write_all(BUNDLE_MAGIC)?;
    o.0.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    o.u32(bundle.extractor.layers.len())?;
    for l in &bundle.extractor.layers {
        o.u32(l.rows)?;
        o.u32(l.cols)?;
        o.f32s(&l.weights)?;
        o.f32s(&l.biases)?;
    }
    o.u32(bundle.pcas.len())?;
    for p in &bundle.pcas {
        o.u32(p.input_dim)?;
        o.u32(p.output_dim)?;
        o.u8(p.rank_deficient as u8)?;
        o.f64s(&p.mean)?;
        o.f64s(&p.components)?;
        o.f64s(&p.explained_variance)?;
    }
    o.f64s([&bundle.state.lambda0])?;
    o.u32(bundle.state.arms.len())?;
    for arm in &bundle.state.arms {
        o.u32(arm.density as usize)?;
        o.u32(arm.dim())?;
        o.f64s(arm.a.transpose().iter())?;
        o.f64s(arm.b.iter())?;
    }
    o.0.flush()?;
    Ok(())
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], BanditError> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => BanditError::Bundle("truncated".into()),
            _ => e.into(),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, BanditError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, BanditError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn dim(&mut self, what: &str) -> Result<usize, BanditError> {
        let v = self.u32()? as usize;
        if v > MAX_DIM {
            return Err(BanditError::Bundle(format!("{what} {v} too large")));
        }
        Ok(v)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, BanditError> {
        (0..n)
            .map(|_| Ok(f32::from_le_bytes(self.bytes()?)))
            .collect()
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, BanditError> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.bytes()?)))
            .collect()
    }
}

pub fn read_bundle(r: impl Read) -> Result<ModelBundle, BanditError> {
    let mut i = In(r);
    if &i.bytes::<4>()? != BUNDLE_MAGIC {
        return Err(BanditError::Bundle("bad magic".into()));
    }
    let version = i.u32()?;
    if version != BUNDLE_VERSION {
        return Err(BanditError::Bundle(format!(
            "unsupported version {version}"
        )));
    }
    let n_layers = i.dim("layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = i.dim("rows")?;
        let cols = i.dim("cols")?;
        let weights = i.f32s(rows * cols)?;
        let biases = i.f32s(rows)?;
        layers.push(FrozenLayer {
            rows,
            cols,
            weights,
            biases,
        });
    }
    let extractor = Extractor { layers };
    extractor.validate()?;

    let n_pca = i.dim("pca count")?;
    let mut pcas = Vec::with_capacity(n_pca);
    for _ in 0..n_pca {
        let input_dim = i.dim("pca input dim")?;
        let output_dim = i.dim("pca output dim")?;
        let rank_deficient = i.u8()? != 0;
        pcas.push(PcaModel {
            mean: i.f64s(input_dim)?,
            components: i.f64s(input_dim * output_dim)?,
            explained_variance: i.f64s(output_dim)?,
            input_dim,
            output_dim,
            rank_deficient,
        });
    }

    let lambda0 = i.f64s(1)?[0];
    let n_arms = i.dim("action count")?;
    let mut arms = Vec::with_capacity(n_arms);
    for _ in 0..n_arms {
        let density = i.u32()?;
        let d = i.dim("latent dim")?;
        let a = DMatrix::from_row_slice(d, d, &i.f64s(d * d)?);
        let b = DVector::from_vec(i.f64s(d)?);
        arms.push(ArmState::from_parts(density, a, b, lambda0)?);
    }
    if i.0.read(&mut [0u8; 1])? != 0 {
        return Err(BanditError::Bundle("trailing bytes".into()));
    }
    Ok(ModelBundle {
        extractor,
        pcas,
        state: BanditState { arms, lambda0 },
    })
}
