//! Text format for face model files. The grammar is documented in
//! docs/model-format.md; briefly: `VERTICES n` followed by n `x y z` lines,
//! `TRIANGLES m` followed by m index triples, `SU <name>` / `AU <name>`
//! blocks of sparse `vertex dx dy dz` displacement lines with an optional
//! `limits min max` line, and a `LANDMARKS` section of `name vertex` lines.
//! `#` starts a comment; blank lines are ignored.

use std::path::Path;

use super::{DeformUnit, FaceModel, ModelError};
use crate::geom::Vec3;

fn parse_floats(line: usize, parts: &[&str]) -> Result<Vec<f64>, ModelError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| ModelError::Parse { line, msg: format!("bad number '{p}'") })
        })
        .collect()
}

fn parse_indices(line: usize, parts: &[&str]) -> Result<Vec<usize>, ModelError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| ModelError::Parse { line, msg: format!("bad index '{p}'") })
        })
        .collect()
}

enum Section {
    None,
    Vertices(usize),
    Triangles(usize),
    Unit { shape: bool },
    Landmarks,
}

pub fn parse_model(text: &str) -> Result<FaceModel, ModelError> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut shape_units: Vec<DeformUnit> = Vec::new();
    let mut animation_units: Vec<DeformUnit> = Vec::new();
    let mut landmarks: Vec<(String, usize)> = Vec::new();
    let mut section = Section::None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let parts: Vec<&str> = content.split_whitespace().collect();
        match parts[0] {
            "VERTICES" => {
                let n = parse_indices(line, &parts[1..])?;
                let n = *n.first().ok_or(ModelError::Parse {
                    line,
                    msg: "VERTICES needs a count".into(),
                })?;
                section = Section::Vertices(n);
                continue;
            }
            "TRIANGLES" => {
                let n = parse_indices(line, &parts[1..])?;
                let n = *n.first().ok_or(ModelError::Parse {
                    line,
                    msg: "TRIANGLES needs a count".into(),
                })?;
                section = Section::Triangles(n);
                continue;
            }
            "SU" | "AU" => {
                let shape = parts[0] == "SU";
                let name = parts.get(1).ok_or(ModelError::Parse {
                    line,
                    msg: format!("{} needs a name", parts[0]),
                })?;
                let unit =
                    DeformUnit { name: name.to_string(), displacements: vec![], limits: (-1.0, 1.0) };
                if shape {
                    shape_units.push(unit);
                } else {
                    animation_units.push(unit);
                }
                section = Section::Unit { shape };
                continue;
            }
            "LANDMARKS" => {
                section = Section::Landmarks;
                continue;
            }
            _ => {}
        }

        match section {
            Section::None => {
                return Err(ModelError::Parse { line, msg: format!("unexpected '{content}'") });
            }
            Section::Vertices(expected) => {
                if parts.len() != 3 {
                    return Err(ModelError::Parse { line, msg: "vertex needs x y z".into() });
                }
                let v = parse_floats(line, &parts)?;
                vertices.push(Vec3::new(v[0], v[1], v[2]));
                if vertices.len() > expected {
                    return Err(ModelError::Parse {
                        line,
                        msg: format!("more than {expected} vertices"),
                    });
                }
            }
            Section::Triangles(expected) => {
                if parts.len() != 3 {
                    return Err(ModelError::Parse { line, msg: "triangle needs 3 indices".into() });
                }
                let t = parse_indices(line, &parts)?;
                triangles.push([t[0], t[1], t[2]]);
                if triangles.len() > expected {
                    return Err(ModelError::Parse {
                        line,
                        msg: format!("more than {expected} triangles"),
                    });
                }
            }
            Section::Unit { shape } => {
                let unit = if shape {
                    shape_units.last_mut().unwrap()
                } else {
                    animation_units.last_mut().unwrap()
                };
                if parts[0] == "limits" {
                    if parts.len() != 3 {
                        return Err(ModelError::Parse { line, msg: "limits needs min max".into() });
                    }
                    let v = parse_floats(line, &parts[1..])?;
                    unit.limits = (v[0], v[1]);
                } else {
                    if parts.len() != 4 {
                        return Err(ModelError::Parse {
                            line,
                            msg: "displacement needs vertex dx dy dz".into(),
                        });
                    }
                    let idx = parse_indices(line, &parts[..1])?[0];
                    let d = parse_floats(line, &parts[1..])?;
                    unit.displacements.push((idx, Vec3::new(d[0], d[1], d[2])));
                }
            }
            Section::Landmarks => {
                if parts.len() != 2 {
                    return Err(ModelError::Parse { line, msg: "landmark needs name index".into() });
                }
                let idx = parse_indices(line, &parts[1..])?[0];
                landmarks.push((parts[0].to_string(), idx));
            }
        }
    }

    FaceModel::new(vertices, triangles, shape_units, animation_units, landmarks)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FaceModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    parse_model(&text)
}

pub fn write_model(model: &FaceModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("VERTICES {}\n", model.vertex_count()));
    for v in model.base_shape() {
        out.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    out.push_str(&format!("TRIANGLES {}\n", model.triangles().len()));
    for t in model.triangles() {
        out.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
    }
    for (kind, units) in [("SU", model.shape_units()), ("AU", model.animation_units())] {
        for unit in units {
            out.push_str(&format!("{kind} {}\n", unit.name));
            out.push_str(&format!("limits {} {}\n", unit.limits.0, unit.limits.1));
            for (v, d) in &unit.displacements {
                out.push_str(&format!("{v} {} {} {}\n", d.x, d.y, d.z));
            }
        }
    }
    out.push_str("LANDMARKS\n");
    for (name, v) in model.landmarks() {
        out.push_str(&format!("{name} {v}\n"));
    }
    out
}

pub fn save_model(model: &FaceModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, write_model(model))
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}
