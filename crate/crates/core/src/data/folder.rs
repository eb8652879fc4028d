//! Directory-per-class datasets: `<root>/<class_name>/*.png|jpg`.

use std::fs;
use std::path::Path;

use image::imageops::FilterType;

use super::synth::{generate_classes, split_classes};
use super::{
    default_partition, ClassGroup, Collection, DomainSource, DomainSpec, Image, LabeledImage,
    CHANNELS,
};
use crate::error::{Error, Result};

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn read_image(path: &Path, side: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img
        .resize_exact(side as u32, side as u32, FilterType::Triangle)
        .to_rgb8();
    let pixels = rgb
        .pixels()
        .flat_map(|p| p.0)
        .map(|v| v as f32 / 255.0)
        .collect();
    Image::from_pixels(side, pixels)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads the classes of `spec`, dropping (with a warning) any class with
/// fewer than `spec.min_images` images.
pub fn load_domain(spec: &DomainSpec) -> Result<Collection> {
    let mut collection = match &spec.source {
        DomainSource::Synthetic {
            seed,
            family,
            images_per_class,
        } => {
            let ids: Vec<usize> = match &spec.classes {
                Some(names) => names
                    .iter()
                    .map(|n| {
                        super::synth::CATALOG
                            .iter()
                            .position(|k| &k.name() == n)
                            .ok_or_else(|| Error::Config(format!("unknown synthetic class `{n}`")))
                    })
                    .collect::<Result<_>>()?,
                None => split_classes(spec.split).collect(),
            };
            let mut c = generate_classes(*seed, &ids, *images_per_class, *family, spec.side)?;
            c.name = spec.name.clone();
            c
        }
        DomainSource::Directory(root) => load_directory(root, spec)?,
    };

    let (keep, drop): (Vec<ClassGroup>, Vec<ClassGroup>) = collection
        .classes
        .into_iter()
        .partition(|c| c.images.len() >= spec.min_images);
    for c in &drop {
        log::warn!(
            "domain {}: excluding class `{}` ({} images < {} required)",
            spec.name,
            c.name,
            c.images.len(),
            spec.min_images
        );
    }
    collection.classes = keep;
    collection.excluded = drop.into_iter().map(|c| c.name).collect();
    Ok(collection)
}

fn load_directory(root: &Path, spec: &DomainSpec) -> Result<Collection> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let all: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect();
    let chosen: Vec<String> = match &spec.classes {
        Some(list) => list.clone(),
        None => all[default_partition(all.len(), spec.split)].to_vec(),
    };
    let mut classes = Vec::with_capacity(chosen.len());
    for name in chosen {
        let class_id = all.iter().position(|n| *n == name).ok_or_else(|| {
            Error::Config(format!("class `{name}` not found under {}", root.display()))
        })?;
        let images = sorted_entries(&root.join(&name))?
            .into_iter()
            .filter(|p| is_image(p))
            .map(|p| {
                Ok(LabeledImage {
                    image: read_image(&p, spec.side)?,
                    class_id,
                    gt_box: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassGroup {
            class_id,
            name,
            images,
        });
    }
    Ok(Collection {
        name: spec.name.clone(),
        side: spec.side,
        classes,
        excluded: Vec::new(),
    })
}

/// Writes a collection in the directory-per-class layout as PNG files.
pub fn export_collection(collection: &Collection, root: &Path) -> Result<()> {
    for class in &collection.classes {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (i, img) in class.images.iter().enumerate() {
            let path = dir.join(format!("{i:05}.png"));
            debug_assert_eq!(img.image.pixels().len() % CHANNELS, 0);
            img.image
                .to_rgb8()
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}
