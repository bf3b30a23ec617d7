//! A line-oriented text format for graphs.
//!
//! Each non-blank line that is not a `#` comment declares one node:
//!
//! ```text
//! <label> <kind> key=value ...
//! ```
//!
//! Labels are arbitrary tokens without whitespace and must be unique.
//! `parents=a,b` lists parent labels in slot order. Numeric lists are comma
//! separated, or `@file` to read whitespace/comma separated numbers from a
//! file relative to the graph file. Matrices are row-major.
//!
//! | kind             | keys                                                   |
//! |------------------|--------------------------------------------------------|
//! | `input`          | `dim`                                                  |
//! | `affine`         | `rows`, `cols`, `weight`, optional `bias`              |
//! | `param_affine`   | `rows`, `cols`, optional `augment` (bool), `data`      |
//! | `elementwise`    | `fn` (tanh, logistic, softplus, square, identity)     |
//! | `squared_loss`   | `target`, optional `scale` (default 1)                 |
//! | `quadratic_form` | `rows`, `cols`, `w`, `z` (`rows × rows`)               |
//! | `slice`          | `offset`, `len`                                        |
//! | `sum`            | `dim`                                                  |
//!
//! Every node except the input needs `parents`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nodes::{NodeKind, Nonlinearity};

/// A parsed graph with the file's label for every node id.
#[derive(Debug, Clone)]
pub struct ParsedGraph {
    pub graph: Graph,
    pub labels: Vec<String>,
}

struct Line<'a> {
    path: &'a Path,
    base: Option<&'a Path>,
    lineno: usize,
    fields: HashMap<&'a str, &'a str>,
    used: HashSet<&'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.lineno,
            msg: msg.into(),
        }
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.insert(key);
        self.fields.get(key).copied()
    }

    fn required(&mut self, key: &'a str) -> Result<&'a str> {
        self.raw(key).ok_or_else(|| self.err(format!("missing '{key}'")))
    }

    fn usize(&mut self, key: &'a str) -> Result<usize> {
        let v = self.required(key)?;
        v.parse().map_err(|_| self.err(format!("'{key}' must be a non-negative integer, got '{v}'")))
    }

    fn f64_opt(&mut self, key: &'a str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("'{key}' must be a number, got '{v}'"))),
        }
    }

    fn bool_opt(&mut self, key: &'a str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(v) => Err(self.err(format!("'{key}' must be true or false, got '{v}'"))),
        }
    }

    fn numbers_opt(&mut self, key: &'a str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let text;
        let body = if let Some(file) = v.strip_prefix('@') {
            let p = match self.base {
                Some(b) => b.join(file),
                None => PathBuf::from(file),
            };
            text = fs::read_to_string(&p).map_err(|e| self.err(format!("cannot read '{}': {e}", p.display())))?;
            text.as_str()
        } else {
            v
        };
        body.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| self.err(format!("'{key}': bad number '{s}'"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn numbers(&mut self, key: &'a str) -> Result<Vec<f64>> {
        self.numbers_opt(key)?.ok_or_else(|| self.err(format!("missing '{key}'")))
    }

    fn matrix(&mut self, key: &'a str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let v = self.numbers(key)?;
        if v.len() != rows * cols {
            return Err(self.err(format!("'{key}' has {} numbers, expected {rows}x{cols}", v.len())));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    }

    fn finish(&self) -> Result<()> {
        let mut extra: Vec<&&str> = self.fields.keys().filter(|k| !self.used.contains(*k)).collect();
        extra.sort();
        match extra.first() {
            Some(k) => Err(self.err(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

fn parse_kind(kind: &str, line: &mut Line<'_>) -> Result<NodeKind> {
    Ok(match kind {
        "input" => NodeKind::Input { dim: line.usize("dim")? },
        "affine" => {
            let (rows, cols) = (line.usize("rows")?, line.usize("cols")?);
            NodeKind::Affine {
                weight: line.matrix("weight", rows, cols)?,
                bias: line.numbers_opt("bias")?,
            }
        }
        "param_affine" => NodeKind::ParamAffine {
            rows: line.usize("rows")?,
            cols: line.usize("cols")?,
            augment: line.bool_opt("augment")?.unwrap_or(false),
            data: line.numbers_opt("data")?,
        },
        "elementwise" => {
            let f = line.required("fn")?;
            NodeKind::Elementwise(Nonlinearity::parse(f).ok_or_else(|| line.err(format!("unknown function '{f}'")))?)
        }
        "squared_loss" => NodeKind::SquaredLoss {
            target: line.numbers("target")?,
            scale: line.f64_opt("scale")?.unwrap_or(1.0),
        },
        "quadratic_form" => {
            let (rows, cols) = (line.usize("rows")?, line.usize("cols")?);
            NodeKind::QuadraticForm {
                w: line.matrix("w", rows, cols)?,
                z: line.matrix("z", rows, rows)?,
            }
        }
        "slice" => NodeKind::Slice {
            offset: line.usize("offset")?,
            len: line.usize("len")?,
        },
        "sum" => NodeKind::Sum { dim: line.usize("dim")? },
        other => return Err(line.err(format!("unknown node kind '{other}'"))),
    })
}

/// Parses graph text. `path` is used in error messages and, through its
/// parent directory, to resolve `@file` references.
pub fn parse_graph(text: &str, path: &Path) -> Result<ParsedGraph> {
    let base = path.parent();
    let mut labels: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<(NodeKind, Vec<String>, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = tokens.next().expect("non-empty line");
        let mut line = Line {
            path,
            base,
            lineno,
            fields: HashMap::new(),
            used: HashSet::new(),
        };
        let Some(kind) = tokens.next() else {
            return Err(line.err("expected '<label> <kind> key=value ...'"));
        };
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| line.err(format!("expected key=value, got '{tok}'")))?;
            if line.fields.insert(k, v).is_some() {
                return Err(line.err(format!("duplicate key '{k}'")));
            }
        }
        let parents: Vec<String> = match line.raw("parents") {
            Some(p) => p.split(',').filter(|s| !s.is_empty()).map(str::to_owned).collect(),
            None => Vec::new(),
        };
        let node = parse_kind(kind, &mut line)?;
        line.finish()?;
        if index.insert(label.to_owned(), labels.len()).is_some() {
            return Err(line.err(format!("duplicate node label '{label}'")));
        }
        labels.push(label.to_owned());
        pending.push((node, parents, lineno));
    }
    let mut nodes = Vec::with_capacity(pending.len());
    for (kind, parents, lineno) in pending {
        let ids = parents
            .iter()
            .map(|p| {
                index.get(p).map(|&i| NodeId(i)).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("unknown parent '{p}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nodes.push((kind, ids));
    }
    let graph = Graph::new(nodes)?;
    Ok(ParsedGraph { graph, labels })
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<ParsedGraph> {
    let path = path.as_ref();
    parse_graph(&fs::read_to_string(path)?, path)
}

/// Parses a comma or whitespace separated list of numbers.
pub fn parse_numbers(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("bad number '{s}'")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_hessian;
    use crate::graph::{evaluate, gradient};

    fn parse(text: &str) -> Result<ParsedGraph> {
        parse_graph(text, Path::new("g.txt"))
    }

    #[test]
    fn quadratic_form_file() {
        let p = parse(
            "# f = ½ yᵀ Z y\n\
             y input dim=2\n\
             f quadratic_form parents=y rows=2 cols=2 w=1,0,0,1 z=0,1,1,0\n",
        )
        .unwrap();
        assert_eq!(p.labels, vec!["y", "f"]);
        let t = evaluate(&p.graph, &[1.0, 2.0]).unwrap();
        assert_eq!(t.value(), 2.0);
        assert_eq!(gradient(&p.graph, &t).unwrap().gradient(), &[2.0, 1.0]);
    }

    #[test]
    fn chain_with_shared_parent() {
        let p = parse(
            "1 input dim=2\n\
             2 affine parents=1 rows=1 cols=2 weight=1,2\n\
             3 elementwise parents=2 fn=square\n\
             4 sum parents=3 dim=1   # trailing comment\n",
        )
        .unwrap();
        let h = exact_hessian(&p.graph, &[0.1, 0.2]).unwrap();
        assert_eq!(h.0, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 4.0, 8.0]));
    }

    #[test]
    fn numbers_from_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("w.txt"), "1 2\n3 4\n").unwrap();
        let gpath = dir.path().join("g.txt");
        fs::write(
            &gpath,
            "x input dim=2\na affine parents=x rows=2 cols=2 weight=@w.txt bias=0,1\nl squared_loss parents=a target=0,0\n",
        )
        .unwrap();
        let p = load_graph(&gpath).unwrap();
        let t = evaluate(&p.graph, &[1.0, 1.0]).unwrap();
        assert_eq!(t.y(NodeId(1)), &[3.0, 8.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("x input dim=2\ny bogus parents=x\n", "g.txt:2: unknown node kind 'bogus'"),
            ("x input dim=2\n\ny elementwise parents=z fn=tanh\n", "g.txt:3: unknown parent 'z'"),
            ("x input\n", "g.txt:1: missing 'dim'"),
            ("x input dim=2 color=red\n", "g.txt:1: unknown key 'color'"),
            ("x input dim=2\nx input dim=2\n", "g.txt:2: duplicate node label 'x'"),
            ("x input dim=two\n", "g.txt:1: 'dim' must be a non-negative integer, got 'two'"),
            ("x input dim=2\na affine parents=x rows=1 cols=2 weight=1\n", "g.txt:2: 'weight' has 1 numbers, expected 1x2"),
        ];
        for (text, want) in cases {
            let e = parse(text).unwrap_err().to_string();
            assert_eq!(e, want);
        }
    }

    #[test]
    fn structural_errors_come_from_the_graph() {
        let e = parse("x input dim=2\na elementwise parents=x fn=tanh\n").unwrap_err();
        assert!(matches!(e, Error::Structure(_)), "{e}");
    }
}
