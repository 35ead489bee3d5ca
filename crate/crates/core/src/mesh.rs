//! Triangle meshes: OFF/OBJ parsing, an OFF writer, synthetic primitives and
//! basic measurements.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Indexed triangle soup in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3>,
    faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Builds a mesh, rejecting non-finite coordinates and dangling indices.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if let Some(v) = vertices.iter().find(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidMesh(format!("non-finite vertex {v:?}")));
        }
        if vertices.len() > u32::MAX as usize {
            return Err(Error::InvalidMesh("too many vertices".into()));
        }
        let count = vertices.len();
        for face in &faces {
            if let Some(&bad) = face.iter().find(|&&i| i as usize >= count) {
                return Err(Error::IndexOutOfRange {
                    index: bad as i64,
                    count,
                });
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn triangle(&self, face: usize) -> [Point3; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Sum of per-triangle areas.
    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| triangle_area(&self.triangle(f)))
            .sum()
    }

    /// Component-wise vertex bounds, `None` for a mesh without vertices.
    pub fn bounding_box(&self) -> Option<Aabb> {
        Aabb::from_points(&self.vertices)
    }
}

pub fn surface_area(mesh: &TriangleMesh) -> f64 {
    mesh.surface_area()
}

pub fn bounding_box(mesh: &TriangleMesh) -> Option<Aabb> {
    mesh.bounding_box()
}

pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn triangle_area(tri: &[Point3; 3]) -> f64 {
    0.5 * norm(cross(sub(tri[1], tri[0]), sub(tri[2], tri[0])))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn from_points(points: &[Point3]) -> Option<Self> {
        let first = *points.first()?;
        let mut aabb = Aabb {
            min: first,
            max: first,
        };
        for p in &points[1..] {
            for axis in 0..3 {
                aabb.min[axis] = aabb.min[axis].min(p[axis]);
                aabb.max[axis] = aabb.max[axis].max(p[axis]);
            }
        }
        Some(aabb)
    }

    pub fn extent(&self) -> Point3 {
        sub(self.max, self.min)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

/// A mesh with its class label and an identifier (usually the file stem).
#[derive(Debug, Clone)]
pub struct LabeledShape {
    pub mesh: TriangleMesh,
    pub label: usize,
    pub id: String,
}

/// Reads an `.off` or `.obj` file, picking the parser from the extension.
pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).with_path(path))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let parsed = match ext.as_deref() {
        Some("obj") => parse_obj(&bytes),
        _ => parse_off(&bytes),
    };
    parsed.map_err(|e| e.with_path(path))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let line = line.trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::MalformedRecord {
        line,
        detail: format!("cannot parse {what} from {tok:?}"),
    })
}

fn fan(polygon: &[u32], faces: &mut Vec<[u32; 3]>) {
    for i in 1..polygon.len() - 1 {
        faces.push([polygon[0], polygon[i], polygon[i + 1]]);
    }
}

/// Parses OFF text (also `COFF`/`NOFF`-style headers; extra per-vertex
/// columns are ignored). Polygons are fan-triangulated around their first
/// vertex. The ModelNet variant with the counts glued to the keyword
/// (`OFF490 518 0`) is accepted.
pub fn parse_off(bytes: &[u8]) -> Result<TriangleMesh> {
    let text = String::from_utf8_lossy(bytes);
    let mut lines = content_lines(&text);

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    let keyword_end = header
        .find("OFF")
        .map(|pos| pos + 3)
        .filter(|&end| header[..end - 3].chars().all(|c| c.is_ascii_alphabetic()))
        .ok_or_else(|| Error::MalformedHeader(format!("expected OFF keyword, found {header:?}")))?;
    let glued = header[keyword_end..].trim();
    let counts_line = if glued.is_empty() {
        lines
            .next()
            .map(|(_, l)| l)
            .ok_or_else(|| Error::TruncatedFile("missing element counts".into()))?
    } else {
        glued
    };
    let counts: Vec<usize> = counts_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader(format!("bad element counts {counts_line:?}")))?;
    if counts.len() < 2 {
        return Err(Error::MalformedHeader(format!(
            "bad element counts {counts_line:?}"
        )));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, text) = lines.next().ok_or_else(|| {
            Error::TruncatedFile(format!("expected {nv} vertices, found {}", vertices.len()))
        })?;
        let mut toks = text.split_whitespace();
        let mut v = [0.0; 3];
        for c in v.iter_mut() {
            let tok = toks.next().ok_or_else(|| Error::MalformedRecord {
                line,
                detail: "vertex needs 3 coordinates".into(),
            })?;
            *c = parse_num(tok, line, "coordinate")?;
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(nf);
    let mut polygon = Vec::new();
    for read in 0..nf {
        let (line, text) = lines
            .next()
            .ok_or_else(|| Error::TruncatedFile(format!("expected {nf} faces, found {read}")))?;
        let mut toks = text.split_whitespace();
        let n: usize = parse_num(toks.next().unwrap_or(""), line, "face size")?;
        if n < 3 {
            return Err(Error::MalformedRecord {
                line,
                detail: format!("face with {n} vertices"),
            });
        }
        polygon.clear();
        for _ in 0..n {
            let tok = toks.next().ok_or_else(|| Error::MalformedRecord {
                line,
                detail: format!("face declares {n} vertices but lists fewer"),
            })?;
            let idx: i64 = parse_num(tok, line, "vertex index")?;
            if idx < 0 || idx as usize >= vertices.len() {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    count: vertices.len(),
                });
            }
            polygon.push(idx as u32);
        }
        fan(&polygon, &mut faces);
    }

    TriangleMesh::new(vertices, faces)
}

/// Parses the `v` and `f` records of Wavefront OBJ text. Texture/normal
/// references in faces are dropped and negative indices are resolved
/// against the vertices seen so far.
pub fn parse_obj(bytes: &[u8]) -> Result<TriangleMesh> {
    let text = String::from_utf8_lossy(bytes);
    let mut vertices: Vec<Point3> = Vec::new();
    let mut faces = Vec::new();
    let mut polygon = Vec::new();

    for (line, text) in content_lines(&text) {
        let mut toks = text.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for c in v.iter_mut() {
                    let tok = toks.next().ok_or_else(|| Error::MalformedRecord {
                        line,
                        detail: "vertex needs 3 coordinates".into(),
                    })?;
                    *c = parse_num(tok, line, "coordinate")?;
                }
                vertices.push(v);
            }
            Some("f") => {
                polygon.clear();
                for tok in toks {
                    let head = tok.split('/').next().unwrap_or("");
                    let idx: i64 = parse_num(head, line, "vertex index")?;
                    let count = vertices.len() as i64;
                    let resolved = match idx {
                        0 => {
                            return Err(Error::MalformedRecord {
                                line,
                                detail: "vertex index 0".into(),
                            })
                        }
                        i if i < 0 => count + i,
                        i => i - 1,
                    };
                    if resolved < 0 || resolved >= count {
                        return Err(Error::IndexOutOfRange {
                            index: idx,
                            count: vertices.len(),
                        });
                    }
                    polygon.push(resolved as u32);
                }
                if polygon.len() < 3 {
                    return Err(Error::MalformedRecord {
                        line,
                        detail: format!("face with {} vertices", polygon.len()),
                    });
                }
                fan(&polygon, &mut faces);
            }
            _ => {}
        }
    }

    TriangleMesh::new(vertices, faces)
}

/// Serializes to OFF. Coordinates use the shortest round-trip decimal form,
/// so `parse_off(write_off(m)) == m`.
pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "OFF\n{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out
}

/// Synthetic shape families. Boxes, cylinders and cones are centered in X/Y
/// and rest on `z = 0`; spheres are centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Box { extents: [f64; 3] },
    Sphere { radius: f64, subdivisions: u32 },
    Cylinder { radius: f64, height: f64, segments: u32 },
    Cone { radius: f64, height: f64, segments: u32 },
}

impl Primitive {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Primitive::Box { .. } => "box",
            Primitive::Sphere { .. } => "sphere",
            Primitive::Cylinder { .. } => "cylinder",
            Primitive::Cone { .. } => "cone",
        }
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{name} must be positive, got {value}")))
    }
}

/// Builds a closed triangle mesh for `primitive`. When `jitter > 0` every
/// vertex is displaced by a uniform offset in `[-jitter, jitter]^3` drawn
/// from `seed`; with zero jitter the seed has no effect.
pub fn generate_primitive(primitive: &Primitive, jitter: f64, seed: u64) -> Result<TriangleMesh> {
    if !(jitter.is_finite() && jitter >= 0.0) {
        return Err(Error::InvalidParams(format!("jitter must be >= 0, got {jitter}")));
    }
    let (mut vertices, faces) = match *primitive {
        Primitive::Box { extents } => {
            for (name, e) in ["x extent", "y extent", "z extent"].iter().zip(extents) {
                check_positive(name, e)?;
            }
            box_mesh(extents)
        }
        Primitive::Sphere {
            radius,
            subdivisions,
        } => {
            check_positive("radius", radius)?;
            if subdivisions > 7 {
                return Err(Error::InvalidParams(format!(
                    "sphere subdivision level {subdivisions} exceeds 7"
                )));
            }
            icosphere(radius, subdivisions)
        }
        Primitive::Cylinder {
            radius,
            height,
            segments,
        } => {
            check_positive("radius", radius)?;
            check_positive("height", height)?;
            check_segments(segments)?;
            cylinder(radius, height, segments)
        }
        Primitive::Cone {
            radius,
            height,
            segments,
        } => {
            check_positive("radius", radius)?;
            check_positive("height", height)?;
            check_segments(segments)?;
            cone(radius, height, segments)
        }
    };
    if jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut vertices {
            for c in v.iter_mut() {
                *c += rng.random_range(-jitter..=jitter);
            }
        }
    }
    TriangleMesh::new(vertices, faces)
}

fn check_segments(segments: u32) -> Result<()> {
    if segments < 3 {
        return Err(Error::InvalidParams(format!(
            "need at least 3 segments, got {segments}"
        )));
    }
    Ok(())
}

type RawMesh = (Vec<Point3>, Vec<[u32; 3]>);

fn box_mesh([ex, ey, ez]: [f64; 3]) -> RawMesh {
    let (hx, hy) = (ex / 2.0, ey / 2.0);
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        vertices.push([
            if i & 1 == 0 { -hx } else { hx },
            if i & 2 == 0 { -hy } else { hy },
            if i & 4 == 0 { 0.0 } else { ez },
        ]);
    }
    // outward winding
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    (vertices, faces)
}

fn icosphere(radius: f64, subdivisions: u32) -> RawMesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw: [Point3; 12] = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let project = |p: Point3| {
        let n = norm(p);
        [p[0] / n * radius, p[1] / n * radius, p[2] / n * radius]
    };
    let mut vertices: Vec<Point3> = raw.iter().map(|&p| project(p)).collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Point3>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (pa, pb) = (vertices[a as usize], vertices[b as usize]);
                vertices.push(project([
                    (pa[0] + pb[0]) / 2.0,
                    (pa[1] + pb[1]) / 2.0,
                    (pa[2] + pb[2]) / 2.0,
                ]));
                (vertices.len() - 1) as u32
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (vertices, faces)
}

fn ring(radius: f64, z: f64, segments: u32) -> impl Iterator<Item = Point3> {
    (0..segments).map(move |i| {
        let theta = std::f64::consts::TAU * i as f64 / segments as f64;
        [radius * theta.cos(), radius * theta.sin(), z]
    })
}

fn cylinder(radius: f64, height: f64, segments: u32) -> RawMesh {
    let s = segments;
    let mut vertices: Vec<Point3> = ring(radius, 0.0, s).collect();
    vertices.extend(ring(radius, height, s));
    vertices.push([0.0, 0.0, 0.0]);
    vertices.push([0.0, 0.0, height]);
    let (bottom, top) = (2 * s, 2 * s + 1);
    let mut faces = Vec::with_capacity(4 * s as usize);
    for i in 0..s {
        let j = (i + 1) % s;
        faces.push([i, j, s + j]);
        faces.push([i, s + j, s + i]);
        faces.push([bottom, j, i]);
        faces.push([top, s + i, s + j]);
    }
    (vertices, faces)
}

fn cone(radius: f64, height: f64, segments: u32) -> RawMesh {
    let s = segments;
    let mut vertices: Vec<Point3> = ring(radius, 0.0, s).collect();
    vertices.push([0.0, 0.0, 0.0]);
    vertices.push([0.0, 0.0, height]);
    let (bottom, apex) = (s, s + 1);
    let mut faces = Vec::with_capacity(2 * s as usize);
    for i in 0..s {
        let j = (i + 1) % s;
        faces.push([i, j, apex]);
        faces.push([bottom, j, i]);
    }
    (vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE_OFF: &str = "OFF
8 12 0
0 0 0
1 0 0
0 1 0
1 1 0
0 0 1
1 0 1
0 1 1
1 1 1
3 0 2 1
3 1 2 3
3 4 5 6
3 5 7 6
3 0 1 4
3 1 5 4
3 2 6 3
3 3 6 7
3 0 4 2
3 2 4 6
3 1 3 5
3 3 7 5
";

    #[test]
    fn parses_unit_cube() {
        let mesh = parse_off(CUBE_OFF.as_bytes()).unwrap();
        assert_eq!(mesh.vertices().len(), 8);
        assert_eq!(mesh.faces().len(), 12);
        assert!((mesh.surface_area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn glued_header_matches_two_line_form() {
        let glued = CUBE_OFF.replacen("OFF\n8 12 0", "OFF8 12 0", 1);
        assert_ne!(glued, CUBE_OFF);
        assert_eq!(
            parse_off(glued.as_bytes()).unwrap(),
            parse_off(CUBE_OFF.as_bytes()).unwrap()
        );
    }

    #[test]
    fn quad_is_fan_triangulated() {
        let text = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let mesh = parse_off(text.as_bytes()).unwrap();
        assert_eq!(mesh.faces(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn off_errors() {
        assert!(matches!(
            parse_off(b"PLY\n1 0 0\n0 0 0\n"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_off(b"OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"),
            Err(Error::IndexOutOfRange { index: 7, count: 3 })
        ));
        assert!(matches!(
            parse_off(b"OFF\n3 1 0\n0 0 0\n1 0 0\n"),
            Err(Error::TruncatedFile(_))
        ));
        assert!(matches!(
            parse_off(b"OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn off_ignores_comments_and_color_columns() {
        let text = "# exported\nCOFF\n3 1 0\n0 0 0 255 0 0 255\n1 0 0 0 255 0 255\n0 1 0 0 0 255 255\n3 0 1 2 # tri\n";
        let mesh = parse_off(text.as_bytes()).unwrap();
        assert_eq!(mesh.faces(), &[[0, 1, 2]]);
        assert_eq!(mesh.vertices()[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn obj_records() {
        let basic = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(basic.vertices().len(), 3);
        assert_eq!(basic.faces(), &[[0, 1, 2]]);

        let slashed =
            parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 1/1/1 2/2/2 3/3/3\n")
                .unwrap();
        assert_eq!(slashed.faces(), &[[0, 1, 2]]);

        let negative = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(negative.faces(), &[[0, 1, 2]]);

        let quad = parse_obj(b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1//1 2//1 3//1 4//1\n")
            .unwrap();
        assert_eq!(quad.faces(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn obj_errors() {
        assert!(matches!(
            parse_obj(b"v 0 0 0\nf 1 2 3\n"),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf -4 1 2\n"),
            Err(Error::IndexOutOfRange { index: -4, .. })
        ));
        assert!(matches!(
            parse_obj(b"v 0 zero 0\n"),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        assert!(matches!(
            parse_obj(b"v 0 0 0\nv 1 0 0\nf 1 2\n"),
            Err(Error::MalformedRecord { .. })
        ));
    }

    #[test]
    fn off_writer_round_trips() {
        let mesh = generate_primitive(
            &Primitive::Sphere {
                radius: 0.7,
                subdivisions: 2,
            },
            0.01,
            3,
        )
        .unwrap();
        let back = parse_off(write_off(&mesh).as_bytes()).unwrap();
        assert_eq!(back, mesh);
    }

    #[test]
    fn box_primitive() {
        let mesh = generate_primitive(&Primitive::Box { extents: [1.0; 3] }, 0.0, 0).unwrap();
        assert_eq!(mesh.faces().len(), 12);
        let bb = mesh.bounding_box().unwrap();
        assert_eq!(bb.extent(), [1.0, 1.0, 1.0]);
        assert!((mesh.surface_area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_vertices_on_radius() {
        let mesh = generate_primitive(
            &Primitive::Sphere {
                radius: 1.0,
                subdivisions: 3,
            },
            0.0,
            0,
        )
        .unwrap();
        assert_eq!(mesh.faces().len(), 20 * 64);
        for v in mesh.vertices() {
            assert!((norm(*v) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn icosphere_area_near_analytic() {
        let mesh = generate_primitive(
            &Primitive::Sphere {
                radius: 1.0,
                subdivisions: 4,
            },
            0.0,
            0,
        )
        .unwrap();
        let analytic = 4.0 * std::f64::consts::PI;
        assert!((mesh.surface_area() - analytic).abs() / analytic < 0.01);
    }

    #[test]
    fn cylinder_bounds() {
        let mesh = generate_primitive(
            &Primitive::Cylinder {
                radius: 0.5,
                height: 2.0,
                segments: 32,
            },
            0.0,
            0,
        )
        .unwrap();
        let bb = mesh.bounding_box().unwrap();
        for a in 0..3 {
            assert!((bb.min[a] - [-0.5, -0.5, 0.0][a]).abs() < 1e-12);
            assert!((bb.max[a] - [0.5, 0.5, 2.0][a]).abs() < 1e-12);
        }
    }

    #[test]
    fn right_triangle_area() {
        let mesh = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(mesh.surface_area(), 0.5);
    }

    /// Every edge of a closed mesh is shared by exactly two faces, once in
    /// each direction.
    fn is_watertight(mesh: &TriangleMesh) -> bool {
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for &[a, b, c] in mesh.faces() {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                *edges.entry((u, v)).or_default() += 1;
            }
        }
        edges
            .iter()
            .all(|(&(u, v), &n)| n == 1 && edges.get(&(v, u)) == Some(&1))
    }

    #[test]
    fn primitives_are_watertight_and_deterministic() {
        let kinds = [
            Primitive::Box {
                extents: [1.0, 2.0, 0.5],
            },
            Primitive::Sphere {
                radius: 1.0,
                subdivisions: 2,
            },
            Primitive::Cylinder {
                radius: 0.3,
                height: 1.0,
                segments: 12,
            },
            Primitive::Cone {
                radius: 0.3,
                height: 1.0,
                segments: 12,
            },
        ];
        for kind in &kinds {
            let a = generate_primitive(kind, 0.02, 11).unwrap();
            let b = generate_primitive(kind, 0.02, 11).unwrap();
            assert!(is_watertight(&a), "{kind:?}");
            let bits = |m: &TriangleMesh| -> Vec<u64> {
                m.vertices().iter().flatten().map(|c| c.to_bits()).collect()
            };
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(a.faces(), b.faces());
            let c = generate_primitive(kind, 0.02, 12).unwrap();
            assert_ne!(bits(&a), bits(&c));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(matches!(
            generate_primitive(
                &Primitive::Box {
                    extents: [1.0, 0.0, 1.0]
                },
                0.0,
                0
            ),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            generate_primitive(
                &Primitive::Cone {
                    radius: 1.0,
                    height: 1.0,
                    segments: 2
                },
                0.0,
                0
            ),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            generate_primitive(
                &Primitive::Sphere {
                    radius: -1.0,
                    subdivisions: 1
                },
                0.0,
                0
            ),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn rejects_non_finite_vertices() {
        assert!(TriangleMesh::new(vec![[f64::NAN, 0.0, 0.0]], vec![]).is_err());
    }
}
