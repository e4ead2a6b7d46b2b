//! On-disk operator layout: `manifest.txt` (key=value) plus CTF1 weights
//! `main.ctf`, `aux.ctf` (P3D axial kernel) and `p.ctf` (A3D mixing).
//!
//! ACS stores its three views as one `(Cout, Cin, K, K)` tensor in `main.ctf`;
//! the view boundaries come from the `acs_split` key.

use std::fs;
use std::path::Path;

use super::{FusionWeightP, OperatorKind, OperatorState};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::{io, Dense, Kernel5};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorManifest {
    pub kind: OperatorKind,
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub depth: Option<usize>,
    pub splits: Option<(usize, usize)>,
    pub acs_split: Option<(usize, usize, usize)>,
    pub seed: Option<u64>,
}

impl OperatorManifest {
    pub fn describe(state: &OperatorState, seed: Option<u64>) -> Self {
        let (splits, acs) = match state {
            OperatorState::Tsm { up, down, .. } => (Some((*up, *down)), None),
            OperatorState::Acs {
                axial,
                coronal,
                sagittal,
            } => (
                None,
                Some((axial.shape()[0], coronal.shape()[0], sagittal.shape()[0])),
            ),
            _ => (None, None),
        };
        Self {
            kind: state.kind(),
            cout: state.cout(),
            cin: state.cin(),
            k: state.kernel_size(),
            depth: state.depth_hint(),
            splits,
            acs_split: acs,
            seed,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("type", "operator");
        kv.insert("kind", self.kind);
        kv.insert("cout", self.cout);
        kv.insert("cin", self.cin);
        kv.insert("k", self.k);
        if let Some(d) = self.depth {
            kv.insert("depth", d);
        }
        if let Some((u, d)) = self.splits {
            kv.insert("splits", format!("{u},{d}"));
        }
        if let Some((a, c, s)) = self.acs_split {
            kv.insert("acs_split", format!("{a},{c},{s}"));
        }
        if let Some(seed) = self.seed {
            kv.insert("seed", seed);
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        if kv.get("type").is_some_and(|t| t != "operator") {
            return Err(Error::Manifest(format!(
                "expected type=operator, got {:?}",
                kv.get("type")
            )));
        }
        let pair = |key: &str| -> Result<Option<Vec<usize>>> {
            kv.get(key).map(|_| kv.parse_list(key)).transpose()
        };
        let splits = match pair("splits")? {
            None => None,
            Some(v) if v.len() == 2 => Some((v[0], v[1])),
            Some(v) => return Err(Error::Manifest(format!("splits needs 2 values, got {v:?}"))),
        };
        let acs_split = match pair("acs_split")? {
            None => None,
            Some(v) if v.len() == 3 => Some((v[0], v[1], v[2])),
            Some(v) => {
                return Err(Error::Manifest(format!(
                    "acs_split needs 3 values, got {v:?}"
                )))
            }
        };
        Ok(Self {
            kind: kv.required("kind")?.parse()?,
            cout: kv.parse_required("cout")?,
            cin: kv.parse_required("cin")?,
            k: kv.parse_required("k")?,
            depth: kv
                .get("depth")
                .map(|_| kv.parse_required("depth"))
                .transpose()?,
            splits,
            acs_split,
            seed: kv
                .get("seed")
                .map(|_| kv.parse_required("seed"))
                .transpose()?,
        })
    }
}

pub fn save_operator(
    dir: impl AsRef<Path>,
    state: &OperatorState,
    seed: Option<u64>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = OperatorManifest::describe(state, seed);
    fs::write(dir.join(MANIFEST_FILE), manifest.to_kv().render())?;
    match state {
        OperatorState::NoFusion { kernel }
        | OperatorState::I3d { kernel }
        | OperatorState::Tsm { kernel, .. } => io::write(dir.join("main.ctf"), kernel)?,
        OperatorState::P3d { planar, axial } => {
            io::write(dir.join("main.ctf"), planar)?;
            io::write(dir.join("aux.ctf"), axial)?;
        }
        OperatorState::Acs {
            axial,
            coronal,
            sagittal,
        } => {
            let mut data = axial.data().to_vec();
            data.extend_from_slice(coronal.data());
            data.extend_from_slice(sagittal.data());
            let k = manifest.k;
            io::write(
                dir.join("main.ctf"),
                &Dense::from_vec([manifest.cout, manifest.cin, k, k], data)?,
            )?;
        }
        OperatorState::A3d { kernel, p } => {
            io::write(dir.join("main.ctf"), kernel)?;
            io::write(dir.join("p.ctf"), p.as_dense())?;
        }
    }
    Ok(())
}

pub fn load_operator(dir: impl AsRef<Path>) -> Result<(OperatorState, OperatorManifest)> {
    let dir = dir.as_ref();
    let kv = KvMap::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let m = OperatorManifest::from_kv(&kv)?;
    let state = load_from(dir, &m)?;
    if state.cin() != m.cin || state.cout() != m.cout || state.kernel_size() != m.k {
        return Err(Error::Manifest(format!(
            "weights disagree with manifest dims (cout={}, cin={}, k={})",
            m.cout, m.cin, m.k
        )));
    }
    Ok((state, m))
}

fn load_from(dir: &Path, m: &OperatorManifest) -> Result<OperatorState> {
    let main = || io::read::<5>(dir.join("main.ctf"));
    Ok(match m.kind {
        OperatorKind::NoFusion => OperatorState::NoFusion { kernel: main()? },
        OperatorKind::I3d => OperatorState::I3d { kernel: main()? },
        OperatorKind::P3d => OperatorState::P3d {
            planar: main()?,
            axial: io::read(dir.join("aux.ctf"))?,
        },
        OperatorKind::Tsm => {
            let (up, down) = m
                .splits
                .ok_or_else(|| Error::Manifest("tsm manifest needs splits".into()))?;
            OperatorState::Tsm {
                kernel: main()?,
                up,
                down,
            }
        }
        OperatorKind::A3d => {
            let p = FusionWeightP::new(io::read(dir.join("p.ctf"))?)?;
            if m.depth.is_some_and(|d| d != p.depth()) {
                return Err(Error::Manifest("depth disagrees with p.ctf".into()));
            }
            OperatorState::A3d { kernel: main()?, p }
        }
        OperatorKind::Acs => {
            let (a, c, s) = m
                .acs_split
                .ok_or_else(|| Error::Manifest("acs manifest needs acs_split".into()))?;
            let joint = io::read::<4>(dir.join("main.ctf"))?;
            let [co, ci, k, _] = joint.shape();
            if a + c + s != co || a == 0 || c == 0 || s == 0 {
                return Err(Error::Manifest(format!(
                    "acs_split ({a},{c},{s}) does not partition {co} channels"
                )));
            }
            let block = ci * k * k;
            let rows =
                |start: usize, n: usize| joint.data()[start * block..(start + n) * block].to_vec();
            OperatorState::Acs {
                axial: Kernel5::from_vec([a, ci, 1, k, k], rows(0, a))?,
                coronal: Kernel5::from_vec([c, ci, k, 1, k], rows(a, c))?,
                sagittal: Kernel5::from_vec([s, ci, k, k, 1], rows(a + c, s))?,
            }
        }
    })
}
