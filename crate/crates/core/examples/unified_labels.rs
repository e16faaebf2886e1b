//! Merge three taxonomies into one label space and inspect the tables.

use uniseg_lab::labelspace::{eval_projection, remap_labels, unify, DatasetTaxonomy, LabelMap, IGNORE};

fn main() -> uniseg_lab::Result<()> {
    let city = DatasetTaxonomy::new("city", ["road", "sidewalk", "rider", "car"])?;
    let drive = DatasetTaxonomy::new("drive", ["road", "lane_marking", "motorcyclist", "car"])?;
    let street = DatasetTaxonomy::new("street", ["sky", "road", "bicyclist"])?;
    let space = unify(&[city, drive.clone(), street])?;

    println!("{} unified classes: {}", space.num_classes(), space.classes().join(", "));
    let mut csv = Vec::new();
    space.write_remap_csv(&mut csv)?;
    print!("{}", String::from_utf8_lossy(&csv));

    let local = LabelMap::new(2, 3, vec![0, 1, 2, 3, IGNORE, 0])?;
    let unified = remap_labels(&local, "drive", &space)?;
    println!("drive labels {:?} -> unified {:?}", local.values, unified.values);

    let membership = space.membership("drive")?;
    let missing: Vec<&str> = (0..space.num_classes())
        .filter(|&u| !membership[u])
        .map(|u| space.class_name(u))
        .collect();
    println!("never labelled in drive: {}", missing.join(", "));

    let held_out = DatasetTaxonomy::new("held_out", ["road", "truck", "rider"])?;
    for (u, t) in eval_projection(&space, &held_out) {
        println!("test class {t} ({}) scores unified channel {u}", held_out.classes[t]);
    }
    Ok(())
}
