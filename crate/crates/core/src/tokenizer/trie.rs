use serde::{Deserialize, Serialize};

use super::{Sid, SidTable};

/// One step along a SID path. Codes are tagged with their level so the same
/// code at different levels are distinct symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SidSymbol {
    Code { level: u16, code: u16 },
    Disambiguator(u16),
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    children: Vec<(SidSymbol, usize)>,
    item: Option<String>,
}

/// Prefix tree of every valid SID; leaves carry item ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SidTrie {
    nodes: Vec<Node>,
    leaves: usize,
}

impl SidTrie {
    pub const ROOT: usize = 0;

    pub fn build(table: &SidTable) -> Self {
        let mut trie = SidTrie {
            nodes: vec![Node::default()],
            leaves: 0,
        };
        for (item, sid) in table.iter() {
            let mut node = Self::ROOT;
            for sym in sid.symbols() {
                node = match trie.nodes[node].children.binary_search_by(|(s, _)| s.cmp(&sym)) {
                    Ok(pos) => trie.nodes[node].children[pos].1,
                    Err(pos) => {
                        trie.nodes.push(Node::default());
                        let id = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(pos, (sym, id));
                        id
                    }
                };
            }
            trie.nodes[node].item = Some(item.to_string());
            trie.leaves += 1;
        }
        trie
    }

    /// Children of `node`, sorted by symbol.
    pub fn children(&self, node: usize) -> &[(SidSymbol, usize)] {
        &self.nodes[node].children
    }

    pub fn child(&self, node: usize, sym: SidSymbol) -> Option<usize> {
        let kids = &self.nodes[node].children;
        kids.binary_search_by(|(s, _)| s.cmp(&sym)).ok().map(|pos| kids[pos].1)
    }

    pub fn item(&self, node: usize) -> Option<&str> {
        self.nodes[node].item.as_deref()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    /// Walk `path` from the root.
    pub fn walk(&self, path: &[SidSymbol]) -> Option<usize> {
        path.iter().try_fold(Self::ROOT, |node, &sym| self.child(node, sym))
    }

    /// Every root-to-leaf path with its item, in symbol order.
    pub fn paths(&self) -> Vec<(Vec<SidSymbol>, String)> {
        let mut out = Vec::with_capacity(self.leaves);
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(item) = &self.nodes[node].item {
                out.push((path.clone(), item.clone()));
            }
            for (sym, child) in self.nodes[node].children.iter().rev() {
                let mut next = path.clone();
                next.push(*sym);
                stack.push((*child, next));
            }
        }
        out
    }

    /// Rebuild the SID a path spells.
    pub fn sid_of_path(path: &[SidSymbol]) -> Sid {
        let mut sid = Sid::new(Vec::new());
        for sym in path {
            match *sym {
                SidSymbol::Code { code, .. } => sid.codes.push(code),
                SidSymbol::Disambiguator(d) => sid.disambiguator = Some(d),
            }
        }
        sid
    }
}

pub fn build_trie(table: &SidTable) -> SidTrie {
    SidTrie::build(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, &[u16], Option<u16>)]) -> SidTable {
        SidTable::from_pairs(entries.iter().map(|(i, c, d)| {
            (
                i.to_string(),
                Sid {
                    codes: c.to_vec(),
                    disambiguator: *d,
                },
            )
        }))
        .unwrap()
    }

    #[test]
    fn single_path() {
        let trie = build_trie(&table(&[("a", &[1, 2, 3], None)]));
        assert_eq!(trie.leaf_count(), 1);
        assert_eq!(trie.node_count(), 4);
        let leaf = trie.walk(&Sid::new(vec![1, 2, 3]).symbols()).unwrap();
        assert_eq!(trie.item(leaf), Some("a"));
    }

    #[test]
    fn shared_prefix() {
        let trie = build_trie(&table(&[("a", &[1, 2, 3], None), ("b", &[1, 2, 4], None), ("c", &[0, 0, 0], None)]));
        assert_eq!(trie.leaf_count(), 3);
        // root + (1,2 shared) + 2 leaves + 3 nodes for c
        assert_eq!(trie.node_count(), 1 + 2 + 2 + 3);
        let codes: Vec<_> = trie.children(SidTrie::ROOT).iter().map(|(s, _)| *s).collect();
        assert_eq!(
            codes,
            vec![SidSymbol::Code { level: 0, code: 0 }, SidSymbol::Code { level: 0, code: 1 }]
        );
    }

    #[test]
    fn disambiguated_leaves() {
        let trie = build_trie(&table(&[("a", &[1, 2], Some(0)), ("b", &[1, 2], Some(1))]));
        let mid = trie.walk(&Sid::new(vec![1, 2]).symbols()).unwrap();
        assert_eq!(trie.item(mid), None);
        assert_eq!(trie.children(mid).len(), 2);
        let paths = trie.paths();
        assert_eq!(paths[0].1, "a");
        assert_eq!(SidTrie::sid_of_path(&paths[1].0).disambiguator, Some(1));
    }
}
