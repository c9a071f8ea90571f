//! Binary checkpoint format.
//!
//! ```text
//! PGNN-CKPT 1\n
//! config <json>\n
//! tensor <name> <rows> <cols>\n     (one per parameter, then `bn<i>.mean` / `bn<i>.var` as 1 x d)
//! data\n
//! <f64 little-endian values of every tensor, in manifest order>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{GnnModel, ModelConfig, NodeModel};
use crate::autodiff::{RunningStats, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "PGNN-CKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &GnnModel, mut w: W) -> Result<()> {
    let io = |e| Error::io("checkpoint", e);
    writeln!(w, "{MAGIC} {VERSION}").map_err(io)?;
    writeln!(w, "config {}", serde_json::to_string(model.config())?).map_err(io)?;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        writeln!(w, "tensor {name} {} {}", t.rows(), t.cols()).map_err(io)?;
    }
    for (i, s) in model.bn_stats().iter().enumerate() {
        writeln!(w, "tensor bn{i}.mean 1 {}", s.mean.len()).map_err(io)?;
        writeln!(w, "tensor bn{i}.var 1 {}", s.var.len()).map_err(io)?;
    }
    writeln!(w, "data").map_err(io)?;
    let stats = model.bn_stats().iter().flat_map(|s| [&s.mean[..], &s.var[..]]);
    for chunk in model.params().iter().map(|t| t.data()).chain(stats) {
        for x in chunk {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<GnnModel> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io("checkpoint", e))?;
        if n == 0 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    let header = next_line(&mut r)?;
    match header.split_once(' ') {
        Some((MAGIC, v)) if v.parse::<u32>() == Ok(VERSION) => {}
        Some((MAGIC, v)) => return Err(bad(format!("unsupported version {v}"))),
        _ => return Err(bad("not a checkpoint file".into())),
    }
    let cfg_line = next_line(&mut r)?;
    let cfg_json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| bad("missing config line".into()))?;
    let config: ModelConfig = serde_json::from_str(cfg_json)?;

    let mut manifest = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "data" {
            break;
        }
        let toks: Vec<&str> = l.split(' ').collect();
        let ["tensor", name, rows, cols] = toks[..] else {
            return Err(bad(format!("bad manifest line {l:?}")));
        };
        let dim = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{name}: {e}")));
        manifest.push((name.to_string(), dim(rows)?, dim(cols)?));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, rows, cols) in &manifest {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| bad(format!("{name}: truncated data")))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::from_vec(*rows, *cols, data)?);
    }
    if !r.fill_buf().map_err(|e| Error::io("checkpoint", e))?.is_empty() {
        return Err(bad("trailing bytes after data".into()));
    }
    let n_bn = config.layers.iter().filter(|l| l.use_batchnorm).count();
    if tensors.len() < 2 * n_bn {
        return Err(bad("missing batch-norm statistics".into()));
    }
    let stat_tensors = tensors.split_off(tensors.len() - 2 * n_bn);
    let stats = stat_tensors
        .chunks(2)
        .map(|p| RunningStats {
            mean: p[0].data().to_vec(),
            var: p[1].data().to_vec(),
        })
        .collect();
    GnnModel::from_parts(config, tensors, stats)
}

pub fn save_checkpoint(model: &GnnModel, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GnnModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
