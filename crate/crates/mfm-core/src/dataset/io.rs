//! Cloud file formats: XYZ text, ascii PLY, OBJ, and raw f32 blobs.
//!
//! Loaders return every vertex in file order with no deduplication. Parse
//! failures carry the file path and 1-based line number. OBJ files can also
//! be loaded as meshes for area-weighted surface sampling.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Error, Result};

/// Supported point-cloud file formats, keyed by extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
    Obj,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<CloudFormat> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            "obj" => Ok(CloudFormat::Obj),
            _ => Err(invalid_arg!(
                "unsupported cloud format for {} (expected .xyz, .ply, or .obj)",
                path.display()
            )),
        }
    }
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f32(token: &str, path: &Path, line: usize) -> Result<f32> {
    token
        .parse::<f32>()
        .map_err(|_| format_err(path, line, format!("expected a number, got `{token}`")))
}

/// Load a cloud, dispatching on the file extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let rows = match CloudFormat::from_path(path)? {
        CloudFormat::Xyz => load_xyz_rows(path)?,
        CloudFormat::Ply => load_ply_rows(path)?,
        CloudFormat::Obj => load_obj_mesh(path)?.vertices,
    };
    if rows.is_empty() {
        return Err(invalid_arg!("{} contains no points", path.display()));
    }
    PointCloud::new(rows)
}

fn load_xyz_rows(path: &Path) -> Result<Vec<[f32; 3]>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(format_err(
                path,
                line_no,
                format!("expected `x y z`, got {} fields", tokens.len()),
            ));
        }
        rows.push([
            parse_f32(tokens[0], path, line_no)?,
            parse_f32(tokens[1], path, line_no)?,
            parse_f32(tokens[2], path, line_no)?,
        ]);
    }
    Ok(rows)
}

fn load_ply_rows(path: &Path) -> Result<Vec<[f32; 3]>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    let (line_no, first) = lines
        .next()
        .ok_or_else(|| format_err(path, 1, "empty file"))?;
    if first != "ply" {
        return Err(format_err(path, line_no, "missing `ply` magic"));
    }

    // Header: record the vertex count and where x/y/z sit among the vertex
    // properties; every other element is noted only to skip its rows.
    let mut vertex_count: Option<usize> = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut header_end = 0usize;
    let mut saw_format = false;
    for (line_no, line) in lines.by_ref() {
        if line.is_empty() || line.starts_with("comment") {
            continue;
        }
        if line == "end_header" {
            header_end = line_no;
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "format" => {
                if tokens.get(1) != Some(&"ascii") {
                    return Err(format_err(
                        path,
                        line_no,
                        format!("only ascii ply is supported, got `{line}`"),
                    ));
                }
                saw_format = true;
            }
            "element" => {
                let name = tokens
                    .get(1)
                    .ok_or_else(|| format_err(path, line_no, "element without a name"))?;
                in_vertex_element = *name == "vertex";
                if in_vertex_element {
                    let count = tokens
                        .get(2)
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| format_err(path, line_no, "bad vertex count"))?;
                    vertex_count = Some(count);
                }
            }
            "property" => {
                if in_vertex_element {
                    let name = tokens
                        .last()
                        .ok_or_else(|| format_err(path, line_no, "property without a name"))?;
                    vertex_props.push(name.to_string());
                }
            }
            other => {
                return Err(format_err(path, line_no, format!("unknown header line `{other}`")))
            }
        }
    }
    if header_end == 0 {
        return Err(format_err(path, 1, "header never ends (`end_header` missing)"));
    }
    if !saw_format {
        return Err(format_err(path, 1, "missing `format` line"));
    }
    let vertex_count =
        vertex_count.ok_or_else(|| format_err(path, 1, "no `element vertex` declared"))?;
    let pos = |name: &str| -> Result<usize> {
        vertex_props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| format_err(path, 1, format!("vertex element lacks property `{name}`")))
    };
    let (xi, yi, zi) = (pos("x")?, pos("y")?, pos("z")?);

    let mut rows = Vec::with_capacity(vertex_count);
    for (line_no, line) in lines {
        if rows.len() == vertex_count {
            break; // remaining rows belong to later elements (faces etc.)
        }
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < vertex_props.len() {
            return Err(format_err(
                path,
                line_no,
                format!(
                    "vertex row has {} fields, header declares {}",
                    tokens.len(),
                    vertex_props.len()
                ),
            ));
        }
        rows.push([
            parse_f32(tokens[xi], path, line_no)?,
            parse_f32(tokens[yi], path, line_no)?,
            parse_f32(tokens[zi], path, line_no)?,
        ]);
    }
    if rows.len() != vertex_count {
        return Err(format_err(
            path,
            header_end,
            format!("header declares {vertex_count} vertices, file has {}", rows.len()),
        ));
    }
    Ok(rows)
}

/// An OBJ mesh: vertices plus triangulated faces (fans for polygons).
#[derive(Debug, Clone)]
pub struct ObjMesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn load_obj_mesh(path: &Path) -> Result<ObjMesh> {
    let text = fs::read_to_string(path)?;
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    let mut triangles = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "v" => {
                if tokens.len() < 4 {
                    return Err(format_err(path, line_no, "vertex needs 3 coordinates"));
                }
                vertices.push([
                    parse_f32(tokens[1], path, line_no)?,
                    parse_f32(tokens[2], path, line_no)?,
                    parse_f32(tokens[3], path, line_no)?,
                ]);
            }
            "f" => {
                if tokens.len() < 4 {
                    return Err(format_err(path, line_no, "face needs at least 3 vertices"));
                }
                let mut ids = Vec::with_capacity(tokens.len() - 1);
                for t in &tokens[1..] {
                    // `i`, `i/j`, `i//k`, `i/j/k`; negative = relative to end.
                    let first = t.split('/').next().unwrap();
                    let raw: i64 = first.parse().map_err(|_| {
                        format_err(path, line_no, format!("bad face index `{t}`"))
                    })?;
                    let resolved = if raw > 0 {
                        raw as usize - 1
                    } else if raw < 0 {
                        let back = (-raw) as usize;
                        if back > vertices.len() {
                            return Err(format_err(path, line_no, "face index before start"));
                        }
                        vertices.len() - back
                    } else {
                        return Err(format_err(path, line_no, "face index 0 is invalid"));
                    };
                    if resolved >= vertices.len() {
                        return Err(format_err(
                            path,
                            line_no,
                            format!("face references vertex {} of {}", resolved + 1, vertices.len()),
                        ));
                    }
                    ids.push(resolved);
                }
                for i in 1..ids.len() - 1 {
                    triangles.push([ids[0], ids[i], ids[i + 1]]);
                }
            }
            _ => {} // normals, texture coords, groups, materials: ignored
        }
    }
    Ok(ObjMesh {
        vertices,
        triangles,
    })
}

/// Draw `n` points uniformly from the mesh surface, triangles weighted by
/// area.
pub fn sample_surface<R: Rng>(mesh: &ObjMesh, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(invalid_arg!("cannot sample zero points"));
    }
    if mesh.triangles.is_empty() {
        return Err(invalid_arg!("mesh has no faces to sample from"));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0f64;
    for tri in &mesh.triangles {
        let (a, b, c) = (
            mesh.vertices[tri[0]],
            mesh.vertices[tri[1]],
            mesh.vertices[tri[2]],
        );
        let u = [
            b[0] as f64 - a[0] as f64,
            b[1] as f64 - a[1] as f64,
            b[2] as f64 - a[2] as f64,
        ];
        let v = [
            c[0] as f64 - a[0] as f64,
            c[1] as f64 - a[1] as f64,
            c[2] as f64 - a[2] as f64,
        ];
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        total += 0.5 * (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(invalid_arg!("mesh has zero surface area"));
    }
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.gen_range(0.0..total);
        let t = cumulative.partition_point(|&c| c <= pick);
        let tri = mesh.triangles[t.min(mesh.triangles.len() - 1)];
        let (a, b, c) = (
            mesh.vertices[tri[0]],
            mesh.vertices[tri[1]],
            mesh.vertices[tri[2]],
        );
        let (mut u, mut v) = (rng.gen_range(0.0f64..1.0), rng.gen_range(0.0f64..1.0));
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let mut p = [0.0f32; 3];
        for axis in 0..3 {
            let base = a[axis] as f64;
            p[axis] = (base
                + u * (b[axis] as f64 - base)
                + v * (c[axis] as f64 - base)) as f32;
        }
        rows.push(p);
    }
    PointCloud::new(rows)
}

/// Write a cloud as XYZ text; coordinates use shortest round-trip notation,
/// so save→load is exact at 32-bit precision.
pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.n_points() * 24);
    for p in cloud.iter() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Raw blob: little-endian f32 rows of three, no header.
pub fn save_blob(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.n_points() * 12);
    for p in cloud.iter() {
        for c in p {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_blob(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(invalid_arg!("{} is empty", path.display()));
    }
    if bytes.len() % 12 != 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            line: 0,
            msg: format!("{} bytes is not a whole number of xyz rows", bytes.len()),
        });
    }
    let mut rows = Vec::with_capacity(bytes.len() / 12);
    for chunk in bytes.chunks_exact(12) {
        let mut p = [0.0f32; 3];
        for (c, four) in p.iter_mut().zip(chunk.chunks_exact(4)) {
            *c = f32::from_le_bytes([four[0], four[1], four[2], four[3]]);
        }
        rows.push(p);
    }
    PointCloud::new(rows)
}
