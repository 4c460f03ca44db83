//! On-disk encoder checkpoints: `manifest.txt`, `vocab.txt`, and one
//! `<name>.f32` little-endian float32 blob per parameter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use super::{sinusoidal_positions, EncoderConfig, Layout, PretrainedModel, POSITION_SCALE};
use crate::error::{Error, Result};
use crate::lexicon::{parse_float, EmbeddingMatrix, Vocabulary};

pub const CHECKPOINT_HEADER: &str = "#version vocab-bridge-encoder-1";
const MANIFEST: &str = "manifest.txt";
const VOCAB: &str = "vocab.txt";

fn write_blob(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::parse(
            path,
            0,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(path, 0, "non-finite value"));
    }
    Ok(values)
}

impl PretrainedModel {
    /// Parameter names and shapes in blob order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("embedding".to_string(), vec![self.embedding.len(), self.dim()]),
            ("output_bias".to_string(), vec![self.output_bias.len()]),
        ];
        out.extend(
            self.layout
                .names()
                .iter()
                .map(|(name, slot)| (name.clone(), slot.shape())),
        );
        out
    }

    fn manifest(&self) -> String {
        let c = &self.config;
        let mut m = String::new();
        m.push_str(CHECKPOINT_HEADER);
        m.push('\n');
        m.push_str("# config fields, then `param <name> <shape...>` per blob in this order;\n");
        m.push_str("# each blob is <name>.f32, little-endian float32, row-major\n");
        let _ = writeln!(m, "dim {}", c.dim);
        let _ = writeln!(m, "num_layers {}", c.num_layers);
        let _ = writeln!(m, "num_heads {}", c.num_heads);
        let _ = writeln!(m, "ffn_dim {}", c.ffn_dim);
        let _ = writeln!(m, "max_seq_len {}", c.max_seq_len);
        let _ = writeln!(m, "mask_fraction {}", c.mask_fraction);
        let _ = writeln!(m, "seed {}", c.seed);
        for (name, shape) in self.parameter_shapes() {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let _ = writeln!(m, "param {name} {}", dims.join(" "));
        }
        m
    }

    /// Writes the checkpoint into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST), self.manifest())?;
        self.vocab().save(dir.join(VOCAB))?;
        write_blob(
            &dir.join("embedding.f32"),
            self.embedding.rows().iter().copied(),
        )?;
        write_blob(&dir.join("output_bias.f32"), self.output_bias.iter().copied())?;
        for (name, slot) in self.layout.names() {
            write_blob(
                &dir.join(format!("{name}.f32")),
                self.backbone[slot.range()].iter().copied(),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path)?;
        let mut config = EncoderConfig::default();
        let mut params: Vec<(String, Vec<usize>)> = Vec::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CHECKPOINT_HEADER => {}
            _ => return Err(Error::parse(&manifest_path, 1, "missing checkpoint header")),
        }
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::parse(&manifest_path, lineno, msg);
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("expected an integer"));
            match fields.as_slice() {
                ["dim", v] => config.dim = int(v)?,
                ["num_layers", v] => config.num_layers = int(v)?,
                ["num_heads", v] => config.num_heads = int(v)?,
                ["ffn_dim", v] => config.ffn_dim = int(v)?,
                ["max_seq_len", v] => config.max_seq_len = int(v)?,
                ["mask_fraction", v] => {
                    config.mask_fraction = parse_float(v).ok_or_else(|| bad("expected a float"))?
                }
                ["seed", v] => config.seed = v.parse().map_err(|_| bad("expected an integer"))?,
                ["param", name, dims @ ..] if !dims.is_empty() => params.push((
                    name.to_string(),
                    dims.iter().map(|d| int(d)).collect::<Result<_>>()?,
                )),
                _ => return Err(bad("unrecognized manifest line")),
            }
        }
        config.validate()?;
        let vocab = Arc::new(Vocabulary::load(dir.join(VOCAB))?);
        let layout = Layout::new(&config);

        let shell = Self {
            config: config.clone(),
            layout: layout.clone(),
            embedding: EmbeddingMatrix::new(vocab.clone(), Array2::zeros((vocab.len(), config.dim)))?,
            output_bias: Array1::zeros(vocab.len()),
            backbone: vec![0.0; layout.total],
            positions: sinusoidal_positions(config.max_seq_len, config.dim, POSITION_SCALE),
        };
        if params != shell.parameter_shapes() {
            return Err(Error::parse(
                &manifest_path,
                0,
                "parameter list does not match the configured architecture",
            ));
        }
        let mut model = shell;
        let emb = read_blob(&dir.join("embedding.f32"), vocab.len() * config.dim)?;
        let rows = Array2::from_shape_vec((vocab.len(), config.dim), emb).expect("shape checked");
        model.embedding = EmbeddingMatrix::new(vocab.clone(), rows)?;
        model.output_bias = Array1::from(read_blob(&dir.join("output_bias.f32"), vocab.len())?);
        for (name, slot) in layout.names() {
            let values = read_blob(&dir.join(format!("{name}.f32")), slot.len())?;
            model.backbone[slot.range()].copy_from_slice(&values);
        }
        Ok(model)
    }
}
