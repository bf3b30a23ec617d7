//! Network checkpoints: a short ASCII header followed by raw parameters.
//!
//! ```text
//! curvprop-mlp 1
//! sizes 256 20 20 20 10
//! activation tanh
//! params 6190
//! end
//! <6190 little-endian f64 values, layer by layer, each W_i row-major>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Mlp;
use crate::error::{Error, Result};
use crate::nodes::Nonlinearity;

const MAGIC: &str = "curvprop-mlp 1";

pub fn write_checkpoint(mlp: &Mlp, mut out: impl Write) -> Result<()> {
    let sizes: Vec<String> = mlp.sizes().iter().map(ToString::to_string).collect();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "sizes {}", sizes.join(" "))?;
    writeln!(out, "activation {}", mlp.hidden().name())?;
    writeln!(out, "params {}", mlp.param_count())?;
    writeln!(out, "end")?;
    for p in mlp.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(input: impl Read, path: &Path) -> Result<Mlp> {
    let mut reader = BufReader::new(input);
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut sizes = None;
    let mut hidden = None;
    let mut count = None;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        lineno += 1;
        if reader.read_line(&mut line)? == 0 {
            return Err(err(lineno, "header ended before 'end'".into()));
        }
        let text = line.trim_end_matches(['\n', '\r']);
        if lineno == 1 {
            if text != MAGIC {
                return Err(err(1, format!("expected '{MAGIC}'")));
            }
            continue;
        }
        let (key, rest) = text.split_once(' ').unwrap_or((text, ""));
        match key {
            "sizes" => {
                let parsed: std::result::Result<Vec<usize>, _> = rest.split_whitespace().map(str::parse).collect();
                sizes = Some(parsed.map_err(|e| err(lineno, format!("bad layer size: {e}")))?);
            }
            "activation" => {
                hidden = Some(
                    Nonlinearity::parse(rest.trim())
                        .ok_or_else(|| err(lineno, format!("unknown activation '{}'", rest.trim())))?,
                );
            }
            "params" => {
                count = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|e| err(lineno, format!("bad parameter count: {e}")))?,
                );
            }
            "end" => break,
            other => return Err(err(lineno, format!("unknown header key '{other}'"))),
        }
    }
    let sizes = sizes.ok_or_else(|| err(lineno, "missing 'sizes'".into()))?;
    let hidden = hidden.ok_or_else(|| err(lineno, "missing 'activation'".into()))?;
    let mut mlp = Mlp::zeros(&sizes, hidden).map_err(|e| err(lineno, e.to_string()))?;
    let count = count.ok_or_else(|| err(lineno, "missing 'params'".into()))?;
    if count != mlp.param_count() {
        return Err(err(
            lineno,
            format!("header says {count} parameters but the sizes need {}", mlp.param_count()),
        ));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * count {
        return Err(err(
            lineno,
            format!("expected {} bytes of parameters, found {}", 8 * count, bytes.len()),
        ));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    mlp.set_params(&params)?;
    Ok(mlp)
}

pub fn save_checkpoint(mlp: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(mlp, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    read_checkpoint(File::open(path)?, path)
}
