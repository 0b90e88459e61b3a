//! Caption parsing graph.
//!
//! A caption is decomposed into object nodes carrying their attribute sets and
//! labelled relation edges between nodes. The caption itself plays the role of
//! the root and is kept as a plain field rather than a node, so node degrees
//! only count relation edges.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Relation triple over object indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
}

impl Relation {
    pub fn new(subject: usize, predicate: impl Into<String>, object: usize) -> Self {
        Self { subject, predicate: predicate.into(), object }
    }
}

/// Attribute attached to an object index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attribute {
    pub object: usize,
    pub value: String,
}

impl Attribute {
    pub fn new(object: usize, value: impl Into<String>) -> Self {
        Self { object, value: value.into() }
    }
}

/// Flat primitive sets extracted from one caption.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimitiveSets {
    pub objects: Vec<String>,
    pub relations: Vec<Relation>,
    pub attributes: Vec<Attribute>,
}

impl PrimitiveSets {
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = HashSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            if o.trim().is_empty() {
                return Err(GraphError::EmptyObject { index: i });
            }
            if !seen.insert(o.as_str()) {
                return Err(GraphError::DuplicateObject { object: o.clone() });
            }
        }
        let n = self.objects.len();
        for r in &self.relations {
            for idx in [r.subject, r.object] {
                if idx >= n {
                    return Err(GraphError::IndexOutOfRange { index: idx, len: n });
                }
            }
        }
        for a in &self.attributes {
            if a.object >= n {
                return Err(GraphError::IndexOutOfRange { index: a.object, len: n });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GraphNode {
    pub id: usize,
    pub object: String,
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CaptionParseGraph {
    pub caption: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl CaptionParseGraph {
    pub fn node(&self, id: usize) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn attribute_count(&self) -> usize {
        self.nodes.iter().map(|n| n.attributes.len()).sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("object index {index} out of range for {len} objects")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("duplicate relation triple ({src}, {dst}, {relation:?})")]
    DuplicateTriple { src: usize, dst: usize, relation: String },
    #[error("object {index} is empty")]
    EmptyObject { index: usize },
    #[error("duplicate object {object:?}")]
    DuplicateObject { object: String },
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

/// Builds the graph: node id = object position, one edge per relation triple.
pub fn assemble_graph(caption: &str, prims: &PrimitiveSets) -> Result<CaptionParseGraph, GraphError> {
    prims.validate()?;
    let mut nodes: Vec<GraphNode> = prims
        .objects
        .iter()
        .enumerate()
        .map(|(id, o)| GraphNode { id, object: o.clone(), attributes: Vec::new() })
        .collect();
    for a in &prims.attributes {
        nodes[a.object].attributes.push(a.value.clone());
    }
    let mut seen = HashSet::new();
    let mut edges = Vec::with_capacity(prims.relations.len());
    for r in &prims.relations {
        let e = GraphEdge { src: r.subject, dst: r.object, relation: r.predicate.clone() };
        if !seen.insert(e.clone()) {
            return Err(GraphError::DuplicateTriple { src: e.src, dst: e.dst, relation: e.relation });
        }
        edges.push(e);
    }
    Ok(CaptionParseGraph { caption: caption.to_string(), nodes, edges })
}

/// Where a violation was found.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Locus {
    Node(usize),
    Edge(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateNodeId(usize),
    EmptyObject,
    DanglingEndpoint { endpoint: usize },
    EmptyRelation,
    DuplicateTriple,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub locus: Locus,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (what, i) = match self.locus {
            Locus::Node(i) => ("nodes", i),
            Locus::Edge(i) => ("edges", i),
        };
        write!(f, "{what}[{i}]: {:?}", self.kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_graph(g: &CaptionParseGraph) -> ValidationReport {
    let mut violations = Vec::new();
    let mut ids = HashSet::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if !ids.insert(n.id) {
            violations.push(Violation { locus: Locus::Node(i), kind: ViolationKind::DuplicateNodeId(n.id) });
        }
        if n.object.trim().is_empty() {
            violations.push(Violation { locus: Locus::Node(i), kind: ViolationKind::EmptyObject });
        }
    }
    let mut triples = HashSet::new();
    for (i, e) in g.edges.iter().enumerate() {
        for endpoint in [e.src, e.dst] {
            if !ids.contains(&endpoint) {
                violations.push(Violation {
                    locus: Locus::Edge(i),
                    kind: ViolationKind::DanglingEndpoint { endpoint },
                });
            }
        }
        if e.relation.trim().is_empty() {
            violations.push(Violation { locus: Locus::Edge(i), kind: ViolationKind::EmptyRelation });
        }
        if !triples.insert((e.src, e.dst, e.relation.as_str())) {
            violations.push(Violation { locus: Locus::Edge(i), kind: ViolationKind::DuplicateTriple });
        }
    }
    ValidationReport { violations }
}

/// In-degree plus out-degree; a self-loop counts twice.
pub fn node_degree(g: &CaptionParseGraph, id: usize) -> Result<usize, GraphError> {
    if g.node(id).is_none() {
        return Err(GraphError::UnknownNode(id));
    }
    Ok(g.edges.iter().map(|e| (e.src == id) as usize + (e.dst == id) as usize).sum())
}

pub fn encode_graph_json(g: &CaptionParseGraph) -> Vec<u8> {
    serde_json::to_vec(g).expect("graph serialization is infallible")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("schema error at {path}: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl SchemaError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

pub fn decode_graph_json(bytes: &[u8]) -> Result<CaptionParseGraph, SchemaError> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| SchemaError::new("$", e.to_string()))?;
    let obj = as_object(&root, "$")?;
    check_fields(obj, "", &["caption", "nodes", "edges"])?;
    let caption = get_str(obj, "", "caption")?;
    let mut nodes = Vec::new();
    for (i, v) in get_array(obj, "", "nodes")?.iter().enumerate() {
        let path = format!("nodes[{i}]");
        let n = as_object(v, &path)?;
        check_fields(n, &path, &["id", "object", "attributes"])?;
        let mut attributes = Vec::new();
        for (j, a) in get_array(n, &path, "attributes")?.iter().enumerate() {
            let apath = format!("{path}.attributes[{j}]");
            attributes.push(a.as_str().ok_or_else(|| SchemaError::new(apath, "expected string"))?.to_string());
        }
        nodes.push(GraphNode {
            id: get_index(n, &path, "id")?,
            object: get_str(n, &path, "object")?,
            attributes,
        });
    }
    let mut edges = Vec::new();
    for (i, v) in get_array(obj, "", "edges")?.iter().enumerate() {
        let path = format!("edges[{i}]");
        let e = as_object(v, &path)?;
        check_fields(e, &path, &["src", "dst", "relation"])?;
        edges.push(GraphEdge {
            src: get_index(e, &path, "src")?,
            dst: get_index(e, &path, "dst")?,
            relation: get_str(e, &path, "relation")?,
        });
    }
    let g = CaptionParseGraph { caption, nodes, edges };
    if let Some(v) = validate_graph(&g).violations.first() {
        let path = match v.locus {
            Locus::Node(i) => format!("nodes[{i}]"),
            Locus::Edge(i) => format!("edges[{i}]"),
        };
        return Err(SchemaError::new(path, format!("{:?}", v.kind)));
    }
    Ok(g)
}

fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, SchemaError> {
    v.as_object().ok_or_else(|| SchemaError::new(path, "expected object"))
}

fn check_fields(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<(), SchemaError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(SchemaError::new(join(path, k), "unknown field"));
        }
    }
    for k in allowed {
        if !obj.contains_key(*k) {
            return Err(SchemaError::new(join(path, k), "missing field"));
        }
    }
    Ok(())
}

fn get_str(obj: &Map<String, Value>, path: &str, field: &str) -> Result<String, SchemaError> {
    obj[field]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| SchemaError::new(join(path, field), "expected string"))
}

fn get_index(obj: &Map<String, Value>, path: &str, field: &str) -> Result<usize, SchemaError> {
    obj[field]
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| SchemaError::new(join(path, field), "expected non-negative integer"))
}

fn get_array<'a>(obj: &'a Map<String, Value>, path: &str, field: &str) -> Result<&'a Vec<Value>, SchemaError> {
    obj[field].as_array().ok_or_else(|| SchemaError::new(join(path, field), "expected array"))
}
