//! Names for the linear operators of a layer and the compensation windows
//! they are grouped into.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Serde adapter writing a map as a list of `[key, value]` pairs, for maps
/// whose keys are not strings.
pub mod map_entries {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer, K: Serialize, V: Serialize>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D, K, V>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        D: Deserializer<'de>,
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// A linear operator inside a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl Slot {
    pub const ALL: [Slot; 7] = [Slot::Q, Slot::K, Slot::V, Slot::O, Slot::Up, Slot::Gate, Slot::Down];

    pub fn window_kind(self) -> WindowKind {
        match self {
            Slot::Q | Slot::K | Slot::V => WindowKind::AttQkv,
            Slot::O => WindowKind::AttO,
            Slot::Up | Slot::Gate => WindowKind::FfnUpGate,
            Slot::Down => WindowKind::FfnDown,
        }
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, Slot::Up | Slot::Gate | Slot::Down)
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Q => "q",
            Slot::K => "k",
            Slot::V => "v",
            Slot::O => "o",
            Slot::Up => "up",
            Slot::Gate => "gate",
            Slot::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|slot| slot.name() == s)
    }
}

/// Compensation window types; within a layer they run in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WindowKind {
    #[serde(rename = "ATT_QKV")]
    AttQkv,
    #[serde(rename = "ATT_O")]
    AttO,
    #[serde(rename = "FFN_UPGATE")]
    FfnUpGate,
    #[serde(rename = "FFN_DOWN")]
    FfnDown,
}

impl WindowKind {
    pub const ALL: [WindowKind; 4] = [
        WindowKind::AttQkv,
        WindowKind::AttO,
        WindowKind::FfnUpGate,
        WindowKind::FfnDown,
    ];

    /// Operator slots compensated in this window, in output order.
    pub fn slots(self) -> &'static [Slot] {
        match self {
            WindowKind::AttQkv => &[Slot::Q, Slot::K, Slot::V],
            WindowKind::AttO => &[Slot::O],
            WindowKind::FfnUpGate => &[Slot::Up, Slot::Gate],
            WindowKind::FfnDown => &[Slot::Down],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowKind::AttQkv => "ATT_QKV",
            WindowKind::AttO => "ATT_O",
            WindowKind::FfnUpGate => "FFN_UPGATE",
            WindowKind::FfnDown => "FFN_DOWN",
        }
    }

    pub fn parse(s: &str) -> Option<WindowKind> {
        WindowKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies one probed weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MatrixId {
    pub layer: usize,
    pub slot: Slot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<usize>,
}

impl MatrixId {
    pub fn dense(layer: usize, slot: Slot) -> Self {
        Self {
            layer,
            slot,
            expert: None,
        }
    }

    pub fn expert(layer: usize, slot: Slot, expert: usize) -> Self {
        Self {
            layer,
            slot,
            expert: Some(expert),
        }
    }

    pub fn window(&self) -> WindowId {
        WindowId {
            layer: self.layer,
            kind: self.slot.window_kind(),
        }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.slot.name())?;
        if let Some(e) = self.expert {
            write!(f, ".e{e}")?;
        }
        Ok(())
    }
}

/// One compensation window instance: a window kind in a given layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowId {
    pub layer: usize,
    pub kind: WindowKind,
}

impl fmt::Display for WindowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/{}", self.layer, self.kind)
    }
}
