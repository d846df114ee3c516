//! Arena-backed search tree over decoding states.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Token;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("node {0} is not in the tree")]
    InvalidNode(NodeId),
    #[error("root has no child for token {0}")]
    NoSuchChild(Token),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Link from a parent to one child, carrying the edge statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub token: Token,
    pub child: NodeId,
    /// Prior after expansion temperature, top-k truncation and renormalization.
    pub prior: f64,
    /// `Q(s, a)`.
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Action that led here; `None` for the root.
    pub token: Option<Token>,
    pub parent: Option<NodeId>,
    /// Distance from the current root.
    pub depth: usize,
    /// Children in descending-prior order, ties by ascending token.
    pub edges: Vec<Edge>,
    /// `N(s)`; zero until the node is evaluated.
    pub visit_count: u32,
    /// `V̄(s)`.
    pub mean_value: f64,
    pub is_expanded: bool,
    pub is_terminal: bool,
    /// `ln p(a|s)` of the incoming action under the policy.
    pub policy_logprob: f64,
    /// `ln p_ref(a|s)` of the incoming action, when a reference policy exists.
    pub ref_logprob: Option<f64>,
}

impl Node {
    fn root() -> Self {
        Self {
            token: None,
            parent: None,
            depth: 0,
            edges: Vec::new(),
            visit_count: 0,
            mean_value: 0.0,
            is_expanded: false,
            is_terminal: false,
            policy_logprob: 0.0,
            ref_logprob: None,
        }
    }

    pub fn is_evaluated(&self) -> bool {
        self.visit_count > 0
    }

    pub fn children(&self) -> impl Iterator<Item = (Token, NodeId)> + '_ {
        self.edges.iter().map(|e| (e.token, e.child))
    }

    pub fn edge(&self, token: Token) -> Option<&Edge> {
        self.edges.iter().find(|e| e.token == token)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchTree {
    nodes: Vec<Node>,
    prompt: Vec<Token>,
    depth_offset: usize,
}

impl SearchTree {
    pub const ROOT: NodeId = NodeId(0);

    pub fn new(prompt: Vec<Token>) -> Self {
        Self::with_offset(prompt, 0)
    }

    /// A fresh tree whose root already has `depth_offset` decoded tokens at
    /// the end of `prompt`.
    pub fn with_offset(prompt: Vec<Token>, depth_offset: usize) -> Self {
        Self {
            nodes: vec![Node::root()],
            prompt,
            depth_offset,
        }
    }

    pub fn root(&self) -> NodeId {
        Self::ROOT
    }

    /// Token sequence at the root: the original prompt plus everything decoded so far.
    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }

    /// Tokens decoded before the root of this tree.
    pub fn depth_offset(&self) -> usize {
        self.depth_offset
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::InvalidNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut Node, TreeError> {
        self.nodes.get_mut(id.0).ok_or(TreeError::InvalidNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    /// Links a new unexplored child under `parent` and returns its id.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        token: Token,
        prior: f64,
        policy_logprob: f64,
        ref_logprob: Option<f64>,
    ) -> Result<NodeId, TreeError> {
        let depth = self.node(parent)?.depth + 1;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            token: Some(token),
            parent: Some(parent),
            depth,
            policy_logprob,
            ref_logprob,
            ..Node::root()
        });
        self.nodes[parent.0].edges.push(Edge {
            token,
            child: id,
            prior,
            q: 0.0,
        });
        Ok(id)
    }

    /// Action tokens on the root-to-node path, excluding the prompt.
    pub fn path_tokens(&self, id: NodeId) -> Result<Vec<Token>, TreeError> {
        let mut out = Vec::with_capacity(self.node(id)?.depth);
        let mut cur = id;
        loop {
            let n = self.node(cur)?;
            match (n.token, n.parent) {
                (Some(t), Some(p)) => {
                    out.push(t);
                    cur = p;
                }
                _ => break,
            }
        }
        out.reverse();
        Ok(out)
    }

    /// Full state of a node: prompt followed by the path tokens.
    pub fn state(&self, id: NodeId) -> Result<Vec<Token>, TreeError> {
        let mut s = self.prompt.clone();
        s.extend(self.path_tokens(id)?);
        Ok(s)
    }

    pub fn child_by_token(&self, id: NodeId, token: Token) -> Result<Option<NodeId>, TreeError> {
        Ok(self.node(id)?.edge(token).map(|e| e.child))
    }

    /// Visit counts of the root's children, in child order.
    pub fn root_child_counts(&self) -> Vec<(Token, u32)> {
        self.nodes[0]
            .edges
            .iter()
            .map(|e| (e.token, self.nodes[e.child.0].visit_count))
            .collect()
    }

    /// New tree rooted at the root's child for `token`, with every surviving
    /// node's statistics copied verbatim into a fresh arena.
    pub fn detach_subtree(&self, token: Token) -> Result<SearchTree, TreeError> {
        let new_root = self
            .child_by_token(Self::ROOT, token)?
            .ok_or(TreeError::NoSuchChild(token))?;
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut order = Vec::new();
        let mut queue = VecDeque::from([new_root]);
        while let Some(id) = queue.pop_front() {
            remap[id.0] = order.len();
            order.push(id);
            queue.extend(self.nodes[id.0].edges.iter().map(|e| e.child));
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let src = &self.nodes[old.0];
                let mut n = src.clone();
                n.depth = src.depth - 1;
                n.parent = src.parent.map(|p| NodeId(remap[p.0])).filter(|_| old != new_root);
                for e in &mut n.edges {
                    e.child = NodeId(remap[e.child.0]);
                }
                if old == new_root {
                    n.token = None;
                }
                n
            })
            .collect();
        let mut prompt = self.prompt.clone();
        prompt.push(token);
        Ok(SearchTree {
            nodes,
            prompt,
            depth_offset: self.depth_offset + 1,
        })
    }

    /// Nested JSON view for debugging and golden files.
    pub fn dump(&self) -> serde_json::Value {
        self.dump_node(Self::ROOT)
    }

    fn dump_node(&self, id: NodeId) -> serde_json::Value {
        let n = &self.nodes[id.0];
        serde_json::json!({
            "id": id.0,
            "token": n.token,
            "N": n.visit_count,
            "V": n.mean_value,
            "terminal": n.is_terminal,
            "children": n.edges.iter().map(|e| serde_json::json!({
                "token": e.token,
                "prior": e.prior,
                "Q": e.q,
                "node": self.dump_node(e.child),
            })).collect::<Vec<_>>(),
        })
    }
}
