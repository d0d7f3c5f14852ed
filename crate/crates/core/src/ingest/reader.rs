use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{s, Array3};

use crate::error::{Error, Result};

/// Environment variable naming the root directory of the image store.
pub const IMAGE_ROOT_ENV: &str = "MITOBENCH_IMAGE_ROOT";

/// Raw pixels in height × width × channel layout with values in [0, 255].
pub type RawPatch = Array3<f32>;

/// Region access over whole images and tiled slides alike.
pub trait TileReader: Send + Sync {
    /// (width, height) of the image in pixels.
    fn dimensions(&self, image_ref: &str) -> Result<(usize, usize)>;

    /// Reads `w × h` RGB pixels whose top-left corner is `(x0, y0)`.
    fn read_region(&self, image_ref: &str, x0: usize, y0: usize, w: usize, h: usize) -> Result<RawPatch>;
}

fn check_region(image_ref: &str, dims: (usize, usize), x0: usize, y0: usize, w: usize, h: usize) -> Result<()> {
    if x0 + w > dims.0 || y0 + h > dims.1 {
        return Err(Error::OutOfRange(format!(
            "region ({x0}, {y0}, {w}, {h}) exceeds `{image_ref}` of size {}x{}",
            dims.0, dims.1
        )));
    }
    Ok(())
}

/// In-memory store, mostly for synthetic data and tests.
#[derive(Debug, Clone, Default)]
pub struct MemoryImageStore {
    images: BTreeMap<String, Arc<Array3<u8>>>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an image stored as height × width × 3.
    pub fn insert(&mut self, image_ref: impl Into<String>, pixels: Array3<u8>) -> Result<()> {
        if pixels.shape()[2] != 3 {
            return Err(Error::shape("image channels", "3", pixels.shape()[2].to_string()));
        }
        self.images.insert(image_ref.into(), Arc::new(pixels));
        Ok(())
    }

    pub fn get(&self, image_ref: &str) -> Option<&Array3<u8>> {
        self.images.get(image_ref).map(|a| a.as_ref())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn refs(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    /// Writes every image as PNG below `dir`, using the image ref as file name.
    pub fn save_png(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, px) in &self.images {
            let (h, w, _) = px.dim();
            let buf: Vec<u8> = px.iter().copied().collect();
            let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
                .ok_or_else(|| Error::State("pixel buffer size mismatch".into()))?;
            img.save(dir.join(name))?;
        }
        Ok(())
    }
}

impl TileReader for MemoryImageStore {
    fn dimensions(&self, image_ref: &str) -> Result<(usize, usize)> {
        let img = self
            .images
            .get(image_ref)
            .ok_or_else(|| Error::invalid("image_ref", format!("`{image_ref}` not in store")))?;
        Ok((img.shape()[1], img.shape()[0]))
    }

    fn read_region(&self, image_ref: &str, x0: usize, y0: usize, w: usize, h: usize) -> Result<RawPatch> {
        let dims = self.dimensions(image_ref)?;
        check_region(image_ref, dims, x0, y0, w, h)?;
        let img = &self.images[image_ref];
        Ok(img.slice(s![y0..y0 + h, x0..x0 + w, ..]).mapv(f32::from))
    }
}

/// Whole-image files (PNG, TIFF, JPEG) resolved relative to a root directory.
///
/// Decoded images are kept in a bounded cache; when it is full the cache is
/// cleared before inserting.
pub struct FileImageStore {
    root: PathBuf,
    capacity: usize,
    cache: Mutex<HashMap<String, Arc<image::RgbImage>>>,
}

impl FileImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FileImageStore {
            root: root.into(),
            capacity: 16,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity.max(1);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, image_ref: &str) -> PathBuf {
        self.root.join(image_ref)
    }

    fn image(&self, image_ref: &str) -> Result<Arc<image::RgbImage>> {
        if let Some(img) = self.cache.lock().expect("image cache poisoned").get(image_ref) {
            return Ok(img.clone());
        }
        let path = self.path_of(image_ref);
        let img = Arc::new(image::open(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image(other),
        })?.to_rgb8());
        let mut cache = self.cache.lock().expect("image cache poisoned");
        if cache.len() >= self.capacity {
            cache.clear();
        }
        cache.insert(image_ref.to_string(), img.clone());
        Ok(img)
    }
}

impl TileReader for FileImageStore {
    fn dimensions(&self, image_ref: &str) -> Result<(usize, usize)> {
        if let Some(img) = self.cache.lock().expect("image cache poisoned").get(image_ref) {
            return Ok((img.width() as usize, img.height() as usize));
        }
        let path = self.path_of(image_ref);
        let (w, h) = image::image_dimensions(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image(other),
        })?;
        Ok((w as usize, h as usize))
    }

    fn read_region(&self, image_ref: &str, x0: usize, y0: usize, w: usize, h: usize) -> Result<RawPatch> {
        let img = self.image(image_ref)?;
        check_region(image_ref, (img.width() as usize, img.height() as usize), x0, y0, w, h)?;
        let mut out = Array3::<f32>::zeros((h, w, 3));
        for dy in 0..h {
            for dx in 0..w {
                let p = img.get_pixel((x0 + dx) as u32, (y0 + dy) as u32);
                for c in 0..3 {
                    out[[dy, dx, c]] = f32::from(p[c]);
                }
            }
        }
        Ok(out)
    }
}

/// Picks the image root: explicit value, then the environment variable,
/// then the manifest's own root, then the current directory.
pub fn resolve_image_root(explicit: Option<&Path>, manifest_root: Option<&str>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(v) = std::env::var_os(IMAGE_ROOT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(v);
    }
    manifest_root.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_region_and_bounds() {
        let mut store = MemoryImageStore::new();
        let px = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| (y * 10 + x + c * 100) as u8);
        store.insert("a", px).unwrap();
        assert_eq!(store.dimensions("a").unwrap(), (5, 4));
        let r = store.read_region("a", 1, 2, 3, 2).unwrap();
        assert_eq!(r.dim(), (2, 3, 3));
        assert_eq!(r[[0, 0, 0]], 21.0);
        assert_eq!(r[[1, 2, 1]], 133.0);
        assert!(store.read_region("a", 3, 0, 3, 1).is_err());
        assert!(store.dimensions("b").is_err());
    }

    #[test]
    fn file_store_matches_memory_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut mem = MemoryImageStore::new();
        let px = Array3::from_shape_fn((6, 7, 3), |(y, x, c)| (y * 31 + x * 7 + c * 50) as u8);
        mem.insert("img.png", px).unwrap();
        mem.save_png(dir.path()).unwrap();
        let files = FileImageStore::new(dir.path());
        assert_eq!(files.dimensions("img.png").unwrap(), (7, 6));
        assert_eq!(
            files.read_region("img.png", 2, 1, 4, 3).unwrap(),
            mem.read_region("img.png", 2, 1, 4, 3).unwrap()
        );
        assert!(matches!(files.dimensions("nope.png"), Err(Error::Io { .. })));
    }
}
