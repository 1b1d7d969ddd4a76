//! JSON model files.
//!
//! Matrices are stored row-major as flat arrays next to their dimensions.
//! Floats are written in shortest round-trip decimal form, so a save/load
//! cycle reproduces every value bit-for-bit.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{EiBrainModel, NetworkModel, Nonlinearity};
use crate::error::{invalid, Result};

/// Run identification embedded in every artifact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFile {
    Network {
        n: usize,
        nonlinearity: Nonlinearity,
        a_matrix: Vec<f64>,
        b_matrix: Vec<f64>,
        offset: Vec<f64>,
        gain: Vec<f64>,
        bias: Vec<f64>,
        free_mask: Vec<bool>,
        train_offset: bool,
        train_bias: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        provenance: Option<Provenance>,
    },
    EiBrain {
        n_regions: usize,
        w_p: Vec<f64>,
        w_r: Vec<f64>,
        j_p: Vec<f64>,
        j_r: Vec<f64>,
        tau_p: Vec<f64>,
        tau_r: Vec<f64>,
        gain: Vec<f64>,
        offset: Vec<f64>,
        train_offset: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        provenance: Option<Provenance>,
    },
}

fn row_major<T: nalgebra::Scalar + Copy>(m: &DMatrix<T>) -> Vec<T> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major<T: nalgebra::Scalar + Copy>(n: usize, data: &[T], what: &str) -> Result<DMatrix<T>> {
    if data.len() != n * n {
        return Err(invalid(format!("{what}: expected {} entries, found {}", n * n, data.len())));
    }
    Ok(DMatrix::from_row_slice(n, n, data))
}

fn vector(n: usize, data: &[f64], what: &str) -> Result<DVector<f64>> {
    if data.len() != n {
        return Err(invalid(format!("{what}: expected {n} entries, found {}", data.len())));
    }
    Ok(DVector::from_column_slice(data))
}

impl ModelFile {
    pub fn from_network(m: &NetworkModel, provenance: Option<Provenance>) -> Self {
        ModelFile::Network {
            n: m.n(),
            nonlinearity: m.nonlinearity(),
            a_matrix: row_major(m.a_matrix()),
            b_matrix: row_major(m.b_matrix()),
            offset: m.offset().as_slice().to_vec(),
            gain: m.gain().as_slice().to_vec(),
            bias: m.bias().as_slice().to_vec(),
            free_mask: row_major(m.free_mask()),
            train_offset: m.trains_offset(),
            train_bias: m.trains_bias(),
            provenance,
        }
    }

    pub fn from_ei_brain(m: &EiBrainModel, provenance: Option<Provenance>) -> Self {
        ModelFile::EiBrain {
            n_regions: m.n_regions(),
            w_p: row_major(&m.w_p),
            w_r: row_major(&m.w_r),
            j_p: m.j_p.as_slice().to_vec(),
            j_r: m.j_r.as_slice().to_vec(),
            tau_p: m.tau_p.as_slice().to_vec(),
            tau_r: m.tau_r.as_slice().to_vec(),
            gain: m.gain.as_slice().to_vec(),
            offset: m.offset.as_slice().to_vec(),
            train_offset: m.train_offset,
            provenance,
        }
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        match self {
            ModelFile::Network { provenance, .. } | ModelFile::EiBrain { provenance, .. } => provenance.as_ref(),
        }
    }

    pub fn to_network(&self) -> Result<NetworkModel> {
        match self {
            ModelFile::Network {
                n,
                nonlinearity,
                a_matrix,
                b_matrix,
                offset,
                gain,
                bias,
                free_mask,
                train_offset,
                train_bias,
                ..
            } => {
                let n = *n;
                let b = from_row_major(n, b_matrix, "b_matrix")?;
                let mask = from_row_major(n, free_mask, "free_mask")?;
                NetworkModel::new(from_row_major(n, a_matrix, "a_matrix")?, DMatrix::zeros(n, n), vector(n, offset, "offset")?)?
                    .with_nonlinearity(*nonlinearity)
                    .with_gain(vector(n, gain, "gain")?)?
                    .with_bias(vector(n, bias, "bias")?)?
                    .with_free_mask(mask)?
                    .with_b_matrix(b)
                    .map(|m| m.with_trainable_offset(*train_offset).with_trainable_bias(*train_bias))
            }
            ModelFile::EiBrain { .. } => self.to_ei_brain()?.to_network(),
        }
    }

    pub fn to_ei_brain(&self) -> Result<EiBrainModel> {
        match self {
            ModelFile::EiBrain {
                n_regions,
                w_p,
                w_r,
                j_p,
                j_r,
                tau_p,
                tau_r,
                gain,
                offset,
                train_offset,
                ..
            } => {
                let n = *n_regions;
                Ok(EiBrainModel::new(
                    from_row_major(n, w_p, "w_p")?,
                    from_row_major(n, w_r, "w_r")?,
                    vector(n, j_p, "j_p")?,
                    vector(n, j_r, "j_r")?,
                    vector(n, tau_p, "tau_p")?,
                    vector(n, tau_r, "tau_r")?,
                    vector(2 * n, gain, "gain")?,
                    vector(2 * n, offset, "offset")?,
                )?
                .with_trainable_offset(*train_offset))
            }
            ModelFile::Network { .. } => Err(invalid("model file holds a network model, not an E/I brain model")),
        }
    }
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn network_file_roundtrip_is_bit_exact(
            vals in proptest::collection::vec(-1e6f64..1e6, 9),
            offs in proptest::collection::vec(-10.0f64..10.0, 3),
            tiny in -1e-300f64..1e-300,
        ) {
            let mut b = DMatrix::from_row_slice(3, 3, &vals);
            b[(2, 2)] = tiny;
            let mut mask = DMatrix::from_element(3, 3, true);
            mask[(0, 1)] = false;
            let m = NetworkModel::new(b.clone() * 0.5, b, DVector::from_vec(offs)).unwrap()
                .with_free_mask(mask).unwrap()
                .with_trainable_offset(true);
            let file = ModelFile::from_network(&m, Some(Provenance { config_hash: "abc".into(), seed: 7 }));
            let text = serde_json::to_string(&file).unwrap();
            let back: ModelFile = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(&back, &file);
            prop_assert_eq!(back.to_network().unwrap(), m);
        }
    }

    #[test]
    fn brain_file_roundtrip() {
        let m = EiBrainModel::new(
            DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]),
            DMatrix::from_row_slice(2, 2, &[-0.1, 0.25, 1.0 / 3.0, 0.0]),
            DVector::from_vec(vec![0.5, 0.6]),
            DVector::from_vec(vec![0.7, 0.8]),
            DVector::from_vec(vec![2.0, 3.0]),
            DVector::from_vec(vec![1.5, 1.25]),
            DVector::from_element(4, 1.0),
            DVector::from_vec(vec![0.0, 0.1, -0.1, 0.2]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &ModelFile::from_ei_brain(&m, None)).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.to_ei_brain().unwrap(), m);
        assert!(back.to_network().is_ok());
    }
}
