//! Serbian Cyrillic to Latin transliteration with an embedded table.
//!
//! Covers the 30 letters of the Serbian Cyrillic alphabet in both cases.
//! Three letters map to digraphs (Љ→Lj, Њ→Nj, Џ→Dž); their uppercase forms
//! are rendered title-case, which is the convention of standard Serbian
//! Latin orthography. Characters outside the table pass through unchanged,
//! which makes the function idempotent: Latin text is a fixed point.

/// One Cyrillic letter and its Latin rendering, lowercase and uppercase.
const TABLE: [(char, &str); 60] = [
    ('а', "a"), ('А', "A"),
    ('б', "b"), ('Б', "B"),
    ('в', "v"), ('В', "V"),
    ('г', "g"), ('Г', "G"),
    ('д', "d"), ('Д', "D"),
    ('ђ', "đ"), ('Ђ', "Đ"),
    ('е', "e"), ('Е', "E"),
    ('ж', "ž"), ('Ж', "Ž"),
    ('з', "z"), ('З', "Z"),
    ('и', "i"), ('И', "I"),
    ('ј', "j"), ('Ј', "J"),
    ('к', "k"), ('К', "K"),
    ('л', "l"), ('Л', "L"),
    ('љ', "lj"), ('Љ', "Lj"),
    ('м', "m"), ('М', "M"),
    ('н', "n"), ('Н', "N"),
    ('њ', "nj"), ('Њ', "Nj"),
    ('о', "o"), ('О', "O"),
    ('п', "p"), ('П', "P"),
    ('р', "r"), ('Р', "R"),
    ('с', "s"), ('С', "S"),
    ('т', "t"), ('Т', "T"),
    ('ћ', "ć"), ('Ћ', "Ć"),
    ('у', "u"), ('У', "U"),
    ('ф', "f"), ('Ф', "F"),
    ('х', "h"), ('Х', "H"),
    ('ц', "c"), ('Ц', "C"),
    ('ч', "č"), ('Ч', "Č"),
    ('џ', "dž"), ('Џ', "Dž"),
    ('ш', "š"), ('Ш', "Š"),
];

/// Transliterates Serbian Cyrillic text into Latin script.
///
/// ```
/// assert_eq!(varmt::translit::sr_cyrillic_to_latin("Београд"), "Beograd");
/// assert_eq!(varmt::translit::sr_cyrillic_to_latin("Džungla"), "Džungla");
/// ```
pub fn sr_cyrillic_to_latin(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match TABLE.iter().find(|(cyr, _)| *cyr == c) {
            Some((_, lat)) => out.push_str(lat),
            None => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_the_alphabet() {
        let lower: String = TABLE.iter().step_by(2).map(|(c, _)| *c).collect();
        assert_eq!(lower.chars().count(), 30);
        let latin = sr_cyrillic_to_latin(&lower);
        assert_eq!(latin, "abvgdđežzijklljmnnjoprstćufhcčdžš");
    }

    #[test]
    fn digraphs_title_case() {
        assert_eq!(sr_cyrillic_to_latin("Љиљана"), "Ljiljana");
        assert_eq!(sr_cyrillic_to_latin("Њ"), "Nj");
        assert_eq!(sr_cyrillic_to_latin("Џак"), "Džak");
    }

    #[test]
    fn words() {
        assert_eq!(sr_cyrillic_to_latin("Београд"), "Beograd");
        assert_eq!(sr_cyrillic_to_latin("чађ и жар"), "čađ i žar");
    }

    #[test]
    fn idempotent_and_transparent() {
        for s in ["Džungla", "hello, world!", "Београд", "mixed Шум text"] {
            let once = sr_cyrillic_to_latin(s);
            assert_eq!(sr_cyrillic_to_latin(&once), once);
        }
    }
}
