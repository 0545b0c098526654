//! Named ablation configurations.

use serde::{Deserialize, Serialize};

use super::{MaskMode, SicMode, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub description: String,
    pub config: TrainConfig,
}

fn variant(base: &TrainConfig, name: &str, description: &str, f: impl FnOnce(&mut TrainConfig)) -> NamedConfig {
    let mut config = base.clone();
    config.siamese = true;
    config.oim = true;
    f(&mut config);
    config.name = format!("{}-{name}", base.name);
    NamedConfig {
        name: name.to_string(),
        description: description.to_string(),
        config,
    }
}

/// The eight configurations of the ablation study, derived from `base`.
///
/// | name | pairing | dense | masking |
/// |---|---|---|---|
/// | `baseline` | gt_to_gt | no | none |
/// | `sic` | many_to_one | yes | none |
/// | `sic_oic` | many_to_one | yes | search |
/// | `m2o_only` | many_to_one | no | none |
/// | `gt_dense` | gt_to_gt | yes | none |
/// | `pos_to_pos` | pos_to_pos | yes | none |
/// | `mask_instance` | many_to_one | yes | instance |
/// | `mask_both` | many_to_one | yes | both |
pub fn ablation_matrix(base: &TrainConfig) -> Vec<NamedConfig> {
    let set = |sic: SicMode, dense: bool, mask: MaskMode| {
        move |c: &mut TrainConfig| {
            c.sic_mode = sic;
            c.dense_triplet = dense;
            c.mask.mode = mask;
        }
    };
    use MaskMode as M;
    use SicMode as S;
    vec![
        variant(base, "baseline", "one-to-one ground-truth Siamese contrast", set(S::GtToGt, false, M::None)),
        variant(base, "sic", "many-to-one Siamese and dense contrast", set(S::ManyToOne, true, M::None)),
        variant(base, "sic_oic", "spatial plus occlusion contrast (search-branch masking)", set(S::ManyToOne, true, M::Search)),
        variant(base, "m2o_only", "many-to-one Siamese contrast only", set(S::ManyToOne, false, M::None)),
        variant(base, "gt_dense", "ground-truth Siamese plus dense contrast", set(S::GtToGt, true, M::None)),
        variant(base, "pos_to_pos", "one-to-one Siamese contrast of all positives", set(S::PosToPos, true, M::None)),
        variant(base, "mask_instance", "masking on the instance branch", set(S::ManyToOne, true, M::Instance)),
        variant(base, "mask_both", "masking on both branches", set(S::ManyToOne, true, M::Both)),
    ]
}

/// Tables the ablation runner knows.
pub const TABLES: [u32; 6] = [1, 3, 4, 5, 6, 7];

/// Rows of one comparison table as `(row label, config)`.
pub fn ablation_table(base: &TrainConfig, table: u32) -> Result<Vec<(String, NamedConfig)>> {
    let m = ablation_matrix(base);
    let pick = |name: &str| m.iter().find(|c| c.name == name).cloned().expect("known config");
    let rows = |items: &[(&str, &str)]| items.iter().map(|(l, n)| (l.to_string(), pick(n))).collect();
    Ok(match table {
        1 => rows(&[("(a) baseline", "baseline"), ("(b) +SIC", "sic"), ("(c) +SIC+OIC", "sic_oic")]),
        3 => rows(&[
            ("(a) none", "baseline"),
            ("(b) many-to-one", "m2o_only"),
            ("(c) dense", "gt_dense"),
            ("(d) many-to-one + dense", "sic"),
        ]),
        4 => rows(&[("(a) GT-GT", "baseline"), ("(b) pos-pos", "pos_to_pos"), ("(c) many-to-one", "sic")]),
        5 => rows(&[
            ("(a) no masking", "sic"),
            ("(b) search branch", "sic_oic"),
            ("(c) instance branch", "mask_instance"),
            ("(d) two branches", "mask_both"),
        ]),
        6 => [0usize, 2, 4, 6]
            .iter()
            .map(|&k| {
                let mut c = pick("sic_oic");
                c.name = format!("sic_oic_cells{k}");
                c.description = format!("search-branch masking of at most {k} cells");
                c.config.mask.max_cells = k;
                c.config.name = format!("{}-{}", base.name, c.name);
                (format!("max cells {k}"), c)
            })
            .collect(),
        7 => rows(&[("w/o OIC", "sic"), ("w/ OIC", "sic_oic")]),
        other => {
            return Err(Error::Usage(format!(
                "unknown table {other}; expected one of {TABLES:?}"
            )))
        }
    })
}
