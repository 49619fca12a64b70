//! Checkpoint serialization.
//!
//! Layout, all little-endian:
//!   magic "OADT" | u16 version | u64 step | u64 seed
//!   | u32 config_len | config JSON
//!   | u32 num_params
//!   | per param: u16 path_len | path UTF-8 | u8 ndim | u32 dim.. | f32 data
//!
//! Parameter order is the model's visit order, which is deterministic, so
//! save -> load -> save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio::Reader;
use crate::error::{open_file, Error, Result};
use crate::model::{ModelConfig, OadtModel};
use crate::nn::Module;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OADT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A model's weights plus the context needed to rebuild and resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub config: ModelConfig,
    /// `(path, value)` in model visit order.
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<E: Scalar>(model: &OadtModel<E>, step: u64, seed: u64) -> Self {
        let mut params = Vec::new();
        model.visit_params("", &mut |path, p| {
            params.push((path.to_string(), p.value().cast::<f32>()));
        });
        Checkpoint {
            step,
            seed,
            config: model.config().clone(),
            params,
        }
    }

    /// Rebuild the model this checkpoint was saved from.
    pub fn build_model<E: Scalar>(&self) -> Result<OadtModel<E>> {
        let mut model = OadtModel::new(self.config.clone(), self.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Overwrite `model`'s parameters with the stored values. The parameter
    /// sets must agree exactly.
    pub fn load_into<E: Scalar>(&self, model: &mut OadtModel<E>) -> Result<()> {
        let mut stored = self.params.iter();
        let mut err = None;
        model.visit_params_mut("", &mut |path, p| {
            if err.is_some() {
                return;
            }
            match stored.next() {
                Some((sp, value)) if sp == path => {
                    if value.shape() != p.value().shape() {
                        err = Some(Error::shape(
                            "checkpoint_load",
                            format!(
                                "param {path}: stored {:?}, model {:?}",
                                value.shape(),
                                p.value().shape()
                            ),
                        ));
                        return;
                    }
                    // Shapes match, set cannot fail.
                    p.set(value.cast::<E>()).unwrap();
                }
                Some((sp, _)) => {
                    err = Some(Error::Validation(format!(
                        "checkpoint parameter order mismatch: stored {sp}, model wants {path}"
                    )));
                }
                None => {
                    err = Some(Error::Validation(format!(
                        "checkpoint is missing parameter {path}"
                    )));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some((sp, _)) = stored.next() {
            return Err(Error::Validation(format!(
                "checkpoint has extra parameter {sp}"
            )));
        }
        Ok(())
    }
}

/// Compare two configs field by field, naming the first mismatch.
pub fn ensure_config_matches(stored: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    macro_rules! check {
        ($field:ident) => {
            if stored.$field != expected.$field {
                return Err(Error::ConfigMismatch {
                    field: stringify!($field),
                    stored: stored.$field.to_string(),
                    expected: expected.$field.to_string(),
                });
            }
        };
    }
    check!(input_dim);
    check!(num_verbs);
    check!(num_nouns);
    check!(d_model);
    check!(heads);
    check!(mlp_ratio);
    check!(dropout);
    check!(pyramid_levels);
    check!(stem_layers);
    check!(head_layers);
    check!(max_seq_len);
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(ck.step)?;
    w.write_u64::<LittleEndian>(ck.seed)?;
    let config =
        serde_json::to_vec(&ck.config).map_err(|e| Error::Parse(format!("config encode: {e}")))?;
    w.write_u32::<LittleEndian>(config.len() as u32)?;
    w.write_all(&config)?;
    w.write_u32::<LittleEndian>(ck.params.len() as u32)?;
    for (name, value) in &ck.params {
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "parameter path too long: {name}"
            )));
        }
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        let shape = value.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "parameter {name} has rank {}",
                shape.len()
            )));
        }
        w.write_u8(shape.len() as u8)?;
        for &d in shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &x in value.as_slice() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(BufReader::new(open_file(path)?), path);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version as u32,
        });
    }
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.bytes(config_len, "config JSON")?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| r.corrupt(format!("config JSON: {e}")))?;
    config.validate()?;
    let num_params = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(num_params);
    for i in 0..num_params {
        let what = format!("parameter {i}");
        let name_len = r.u16(&what)? as usize;
        let name_bytes = r.bytes(name_len, &what)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| r.corrupt(format!("parameter {i} path is not UTF-8")))?;
        let ndim = r.u8(&what)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u32(&what)? as usize;
            shape.push(d);
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| r.corrupt(format!("parameter {name} shape overflows")))?;
        }
        let data = r.f32_vec(numel, &format!("parameter {name} data"))?;
        for &x in &data {
            if !x.is_finite() {
                return Err(r.corrupt(format!("parameter {name} contains non-finite value {x}")));
            }
        }
        params.push((name, Tensor::from_vec(shape, data)?));
    }
    r.expect_eof()?;
    Ok(Checkpoint {
        step,
        seed,
        config,
        params,
    })
}
