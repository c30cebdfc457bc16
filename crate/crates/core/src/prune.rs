//! Structured channel pruning over layer groups.
//!
//! Every layer has an input and an output endpoint. Feature maps passed
//! from one layer to the next tie `pred.out` to `succ.in` (inter-layer
//! dependency); elementwise layers additionally tie their own input to
//! their output (intra-layer dependency). Connected components of that
//! relation are the layer groups: removing channel `k` of a group removes
//! slice `k` of every member along its coupled axis.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{LayerKind, Network, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pub nodes: Vec<String>,
    /// `(pred, succ)`: `pred`'s output feeds `succ`'s input.
    pub inter_edges: Vec<(String, String)>,
    /// Whether the layer's input-to-output map is diagonal over channels.
    pub intra: IndexMap<String, bool>,
}

pub fn build_dependency_graph(spec: &NetworkSpec) -> DependencyGraph {
    let mut inter_edges = vec![];
    let mut intra = IndexMap::new();
    for l in spec.layers() {
        for p in &l.inputs {
            inter_edges.push((p.clone(), l.id.clone()));
        }
        intra.insert(l.id.clone(), l.kind.is_elementwise());
    }
    DependencyGraph {
        nodes: spec.layers().iter().map(|l| l.id.clone()).collect(),
        inter_edges,
        intra,
    }
}

/// Which parameter axis of a member is tied to the group's channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coupling {
    /// Conv output filters (weight axis 0 and the bias).
    ConvOut,
    /// Conv input channels (weight axis 1).
    ConvIn,
    /// Per-channel elementwise layer (BN vectors; relu and add hold none).
    Channel,
    /// Network input or output; pins the channel count.
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMember {
    pub layer: String,
    pub coupling: Coupling,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGroup {
    pub id: usize,
    pub members: Vec<GroupMember>,
    /// Length K of the coupled axis.
    pub size: usize,
    pub prunable: bool,
}

impl LayerGroup {
    pub fn contains(&self, layer: &str, coupling: Coupling) -> bool {
        self.members.iter().any(|m| m.layer == layer && m.coupling == coupling)
    }

    /// True when some member produces the group's feature map, i.e. the
    /// group is anchored at a layer output rather than only consuming one.
    pub fn has_producer(&self) -> bool {
        self.members
            .iter()
            .any(|m| matches!(m.coupling, Coupling::ConvOut | Coupling::Channel))
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = vec![];
        for m in &self.members {
            if !ids.contains(&m.layer.as_str()) {
                ids.push(&m.layer);
            }
        }
        ids
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let p = self.0[i];
        if p == i {
            return i;
        }
        let r = self.find(p);
        self.0[i] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so group order follows topology
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Connected components over endpoints; groups are ordered by their first
/// endpoint in topological order.
pub fn form_layer_groups(spec: &NetworkSpec, graph: &DependencyGraph) -> Result<Vec<LayerGroup>> {
    let pos: HashMap<&str, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let at = |id: &str| -> Result<usize> {
        pos.get(id)
            .copied()
            .ok_or_else(|| Error::Structure(format!("layer `{id}` missing from graph")))
    };
    let endpoint = |i: usize, e: Endpoint| 2 * i + (e == Endpoint::Out) as usize;
    let mut uf = UnionFind((0..2 * graph.nodes.len()).collect());
    for (p, s) in &graph.inter_edges {
        uf.union(endpoint(at(p)?, Endpoint::Out), endpoint(at(s)?, Endpoint::In));
    }
    for (id, &diag) in &graph.intra {
        if diag {
            let i = at(id)?;
            uf.union(endpoint(i, Endpoint::In), endpoint(i, Endpoint::Out));
        }
    }

    // Nodes are visited in topological order, so insertion order of the
    // components orders groups by their first member.
    let mut groups: IndexMap<usize, LayerGroup> = IndexMap::new();
    for (i, id) in graph.nodes.iter().enumerate() {
        let layer = spec
            .layer(id)
            .ok_or_else(|| Error::Structure(format!("graph node `{id}` not in spec")))?;
        let slots: &[(Endpoint, Coupling)] = match &layer.kind {
            LayerKind::Conv(_) => &[(Endpoint::In, Coupling::ConvIn), (Endpoint::Out, Coupling::ConvOut)],
            LayerKind::Input { .. } => &[(Endpoint::Out, Coupling::Boundary)],
            LayerKind::Output => &[(Endpoint::In, Coupling::Boundary)],
            LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::Add => {
                &[(Endpoint::Out, Coupling::Channel)]
            }
        };
        for &(e, coupling) in slots {
            let g = groups.entry(uf.find(endpoint(i, e))).or_insert_with(|| LayerGroup {
                id: 0,
                members: vec![],
                size: 0,
                prunable: true,
            });
            g.prunable &= coupling != Coupling::Boundary;
            g.members.push(GroupMember {
                layer: id.clone(),
                coupling,
            });
        }
    }

    let mut out: Vec<LayerGroup> = groups.into_values().collect();
    for (gid, g) in out.iter_mut().enumerate() {
        g.id = gid;
        let ks: Vec<usize> = g.members.iter().map(|m| member_size(spec, m)).collect::<Result<_>>()?;
        if ks.iter().any(|&k| k != ks[0]) {
            let detail: Vec<String> = g
                .members
                .iter()
                .zip(&ks)
                .map(|(m, k)| format!("{}:{k}", m.layer))
                .collect();
            return Err(Error::Structure(format!(
                "group {gid} couples axes of different lengths: {}",
                detail.join(", ")
            )));
        }
        g.size = ks[0];
    }
    Ok(out)
}

fn member_size(spec: &NetworkSpec, m: &GroupMember) -> Result<usize> {
    let layer = spec
        .layer(&m.layer)
        .ok_or_else(|| Error::Structure(format!("layer `{}` not in spec", m.layer)))?;
    Ok(match (&layer.kind, m.coupling) {
        (LayerKind::Conv(c), Coupling::ConvOut) => c.out_channels,
        (LayerKind::Conv(c), Coupling::ConvIn) => c.in_channels,
        _ => spec.channels_out(&m.layer).expect("layer exists"),
    })
}

/// Convenience: dependency graph and groups in one call.
pub fn layer_groups(spec: &NetworkSpec) -> Result<Vec<LayerGroup>> {
    form_layer_groups(spec, &build_dependency_graph(spec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub group: usize,
    pub prunable: bool,
    pub alpha: Vec<f64>,
}

fn l1(values: impl Iterator<Item = f64>) -> f64 {
    values.map(f64::abs).sum()
}

fn param<'a>(net: &'a Network, name: &str) -> Result<&'a Tensor> {
    net.param(name)
        .ok_or_else(|| Error::Structure(format!("network has no parameter `{name}`")))
}

/// ℓ1 norm of each channel slice of one member, or `None` if the member
/// holds no parameters.
fn member_norms(net: &Network, m: &GroupMember, k: usize) -> Result<Option<Vec<f64>>> {
    let layer = net.spec().layer(&m.layer).expect("member from this spec");
    Ok(match (&layer.kind, m.coupling) {
        (LayerKind::Conv(c), Coupling::ConvOut) => {
            let w = param(net, &format!("{}.weight", m.layer))?;
            let per = w.numel() / c.out_channels;
            let mut norms: Vec<f64> = w.data().chunks(per).map(|s| l1(s.iter().copied())).collect();
            if c.bias {
                let b = param(net, &format!("{}.bias", m.layer))?;
                for (n, v) in norms.iter_mut().zip(b.data()) {
                    *n += v.abs();
                }
            }
            Some(norms)
        }
        (LayerKind::Conv(c), Coupling::ConvIn) => {
            let w = param(net, &format!("{}.weight", m.layer))?;
            let kk = c.kernel * c.kernel;
            let mut norms = vec![0.0; k];
            for (j, chunk) in w.data().chunks(kk).enumerate() {
                norms[j % c.in_channels] += l1(chunk.iter().copied());
            }
            Some(norms)
        }
        (LayerKind::BatchNorm { .. }, Coupling::Channel) => {
            let g = param(net, &format!("{}.gamma", m.layer))?;
            let b = param(net, &format!("{}.beta", m.layer))?;
            Some(g.data().iter().zip(b.data()).map(|(g, b)| g.abs() + b.abs()).collect())
        }
        _ => None,
    })
}

/// Group ℓ1 importance: for channel k, the mean over parameterized members
/// of the ℓ1 norm of that member's slice k. Members without parameters
/// (relu, add, boundaries) are left out of the mean.
pub fn score_groups(net: &Network, groups: &[LayerGroup]) -> Result<Vec<ImportanceVector>> {
    groups
        .iter()
        .map(|g| {
            let mut alpha = vec![0.0; g.size];
            let mut m = 0usize;
            for member in &g.members {
                if let Some(norms) = member_norms(net, member, g.size)? {
                    if norms.len() != g.size {
                        return Err(Error::Structure(format!(
                            "layer `{}` has {} channels, group {} expects {}",
                            member.layer,
                            norms.len(),
                            g.id,
                            g.size
                        )));
                    }
                    m += 1;
                    for (a, n) in alpha.iter_mut().zip(norms) {
                        *a += n;
                    }
                }
            }
            if m > 0 {
                alpha.iter_mut().for_each(|a| *a /= m as f64);
            }
            Ok(ImportanceVector {
                group: g.id,
                prunable: g.prunable,
                alpha,
            })
        })
        .collect()
}

/// Channels to remove, per group id (sorted ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub ratio: f64,
    pub removals: IndexMap<usize, Vec<usize>>,
}

impl PrunePlan {
    pub fn empty() -> Self {
        PrunePlan {
            ratio: 0.0,
            removals: IndexMap::new(),
        }
    }

    pub fn removed(&self, group: usize) -> &[usize] {
        self.removals.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Number of channels removed from a group of width `k`.
pub fn channels_to_remove(k: usize, ratio: f64) -> usize {
    // the epsilon keeps exact products such as 0.35 * 20 from flooring to 6
    let n = (ratio * k as f64 + 1e-9).floor() as usize;
    n.min(k.saturating_sub(1))
}

/// In each prunable group remove the ⌊ratio·K⌋ lowest-scoring channels
/// (ties go to the lower index), always keeping at least one.
pub fn select_prune_set(scores: &[ImportanceVector], ratio: f64) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid("select_prune_set", format!("ratio {ratio} outside [0, 1)")));
    }
    let mut removals = IndexMap::new();
    for s in scores.iter().filter(|s| s.prunable) {
        let n = channels_to_remove(s.alpha.len(), ratio);
        if n == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..s.alpha.len()).collect();
        order.sort_by(|&a, &b| s.alpha[a].total_cmp(&s.alpha[b]).then(a.cmp(&b)));
        let mut pick = order[..n].to_vec();
        pick.sort_unstable();
        removals.insert(s.group, pick);
    }
    Ok(PrunePlan { ratio, removals })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: usize,
    pub k_before: usize,
    pub k_after: usize,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub nominal_ratio: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub groups: Vec<GroupReport>,
}

impl PruneReport {
    pub fn achieved_ratio(&self) -> f64 {
        if self.params_before == 0 {
            return 0.0;
        }
        1.0 - self.params_after as f64 / self.params_before as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "row",
            "group",
            "k_before",
            "k_after",
            "removed",
            "nominal_ratio",
            "achieved_ratio",
            "params_before",
            "params_after",
        ])?;
        for g in &self.groups {
            let removed: Vec<String> = g.removed.iter().map(usize::to_string).collect();
            out.write_record([
                "group".to_string(),
                g.group.to_string(),
                g.k_before.to_string(),
                g.k_after.to_string(),
                removed.join(";"),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        out.write_record([
            "summary".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            self.nominal_ratio.to_string(),
            format!("{:.6}", self.achieved_ratio()),
            self.params_before.to_string(),
            self.params_after.to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for PruneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "nominal {:.2} achieved {:.4} params {} -> {}",
            self.nominal_ratio,
            self.achieved_ratio(),
            self.params_before,
            self.params_after
        )
    }
}

fn keep_list(k: usize, removed: &[usize]) -> Vec<usize> {
    (0..k).filter(|i| removed.binary_search(i).is_err()).collect()
}

/// Gather `keep` indices along `axis`.
fn select_axis(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * shape[axis] + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::new(&new_shape, data).expect("sizes agree")
}

/// Physically remove the planned channels from every group member.
pub fn apply_prune(net: &Network, groups: &[LayerGroup], plan: &PrunePlan) -> Result<(Network, PruneReport)> {
    let spec = net.spec();
    let mut keep: HashMap<(String, Coupling), Vec<usize>> = HashMap::new();
    let mut reports = vec![];
    for (&gid, removed) in &plan.removals {
        let g = groups
            .iter()
            .find(|g| g.id == gid)
            .ok_or_else(|| Error::Structure(format!("plan names unknown group {gid}")))?;
        if !g.prunable {
            return Err(Error::Structure(format!("group {gid} is pinned by the network boundary")));
        }
        let mut sorted = removed.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != removed.len() || sorted.last().is_some_and(|&i| i >= g.size) {
            return Err(Error::Structure(format!("group {gid}: bad indices {removed:?} for K={}", g.size)));
        }
        if sorted.len() >= g.size {
            return Err(Error::Structure(format!("group {gid}: plan removes every channel")));
        }
        for m in &g.members {
            if member_size(spec, m)? != g.size {
                return Err(Error::Structure(format!(
                    "group {gid} does not match layer `{}` of this network",
                    m.layer
                )));
            }
            keep.insert((m.layer.clone(), m.coupling), keep_list(g.size, &sorted));
        }
        reports.push(GroupReport {
            group: gid,
            k_before: g.size,
            k_after: g.size - sorted.len(),
            removed: sorted,
        });
    }
    for g in groups.iter().filter(|g| !plan.removals.contains_key(&g.id)) {
        reports.push(GroupReport {
            group: g.id,
            k_before: g.size,
            k_after: g.size,
            removed: vec![],
        });
    }
    reports.sort_by_key(|r| r.group);

    let kept = |layer: &str, c: Coupling| keep.get(&(layer.to_string(), c));
    let mut layers = spec.layers().to_vec();
    for l in &mut layers {
        match &mut l.kind {
            LayerKind::Conv(c) => {
                if let Some(k) = kept(&l.id, Coupling::ConvOut) {
                    c.out_channels = k.len();
                }
                if let Some(k) = kept(&l.id, Coupling::ConvIn) {
                    c.in_channels = k.len();
                }
            }
            LayerKind::BatchNorm { channels, .. } => {
                if let Some(k) = kept(&l.id, Coupling::Channel) {
                    *channels = k.len();
                }
            }
            _ => {}
        }
    }
    let new_spec = NetworkSpec::new(layers)?;

    let mut params = vec![];
    for p in net.params() {
        let (layer, suffix) = p.name.rsplit_once('.').expect("parameter names are layer.kind");
        let mut t = p.value.clone();
        match suffix {
            "weight" => {
                if let Some(k) = kept(layer, Coupling::ConvOut) {
                    t = select_axis(&t, 0, k);
                }
                if let Some(k) = kept(layer, Coupling::ConvIn) {
                    t = select_axis(&t, 1, k);
                }
            }
            "bias" => {
                if let Some(k) = kept(layer, Coupling::ConvOut) {
                    t = select_axis(&t, 0, k);
                }
            }
            _ => {
                if let Some(k) = kept(layer, Coupling::Channel) {
                    t = select_axis(&t, 0, k);
                }
            }
        }
        params.push((p.name.clone(), t));
    }
    let mut buffers = vec![];
    for (name, t) in net.buffers() {
        let (layer, _) = name.rsplit_once('.').expect("buffer names are layer.kind");
        let t = match kept(layer, Coupling::Channel) {
            Some(k) => select_axis(t, 0, k),
            None => t.clone(),
        };
        buffers.push((name.clone(), t));
    }
    let pruned = Network::from_parts(new_spec, params, buffers)?;
    let report = PruneReport {
        nominal_ratio: plan.ratio,
        params_before: net.count_params(),
        params_after: pruned.count_params(),
        groups: reports,
    };
    Ok((pruned, report))
}

/// Score, select and rewrite in one step.
pub fn prune_network(net: &Network, ratio: f64) -> Result<(Network, PruneReport)> {
    let groups = layer_groups(net.spec())?;
    let scores = score_groups(net, &groups)?;
    let plan = select_prune_set(&scores, ratio)?;
    apply_prune(net, &groups, &plan)
}
