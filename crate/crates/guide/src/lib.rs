//! The book's code listings, compiled and run as doc-tests. Each chapter is
//! its own module so a failing listing points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/quickstart.md")]
pub mod quickstart {}
#[doc = include_str!("../../../book/src/parameters.md")]
pub mod parameters {}
#[doc = include_str!("../../../book/src/aggregation.md")]
pub mod aggregation {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}

#[cfg(test)]
mod tests {
    /// Every chapter listed in SUMMARY.md must be included above.
    #[test]
    fn summary_chapters_are_tested() {
        let summary = include_str!("../../../book/src/SUMMARY.md");
        let lib = include_str!("lib.rs");
        for line in summary.lines() {
            let Some(start) = line.find("](") else {
                continue;
            };
            let file = &line[start + 2..line.len() - 1];
            let needle = format!("book/src/{file}\")]");
            assert!(lib.contains(&needle), "{file} is not doc-tested");
        }
    }
}
