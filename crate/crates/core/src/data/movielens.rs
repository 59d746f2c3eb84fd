//! MovieLens-1M `::`-delimited files (latin-1 text).
//!
//! Movies are the ads. Title tokens, release year and genres are ad
//! features; user ID, age, gender and occupation are the other features.
//! Ratings of 4 or 5 become positive labels.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::instance::{Dataset, FieldValue, Instance};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::{FieldGroup, FieldKind, FieldSpec, Schema};

pub const RATINGS_FILE: &str = "ratings.dat";
pub const MOVIES_FILE: &str = "movies.dat";
pub const USERS_FILE: &str = "users.dat";

/// Field order of the loaded schema.
pub const FIELDS: [&str; 8] = [
    "movie_id",
    "title",
    "year",
    "genres",
    "user_id",
    "age",
    "gender",
    "occupation",
];

fn read_latin1(path: &Path) -> Result<String> {
    Ok(fs::read(path)?.into_iter().map(char::from).collect())
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn split_line<'a>(path: &Path, line_no: usize, line: &'a str, expected: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != expected {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {expected} `::`-separated columns, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

/// Splits `"Toy Story (1995)"` into `("Toy Story", Some("1995"))`.
pub fn split_title_year(title: &str) -> (&str, Option<&str>) {
    let t = title.trim_end();
    if let Some(open) = t.rfind('(') {
        let inner = &t[open + 1..];
        if let Some(year) = inner.strip_suffix(')') {
            if year.len() == 4 && year.bytes().all(|b| b.is_ascii_digit()) {
                return (t[..open].trim_end(), Some(year));
            }
        }
    }
    (t, None)
}

/// Lowercased alphanumeric runs.
pub fn tokenize_title(title: &str) -> Vec<String> {
    title
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

struct Movie {
    title: Vec<u32>,
    year: u32,
    genres: Vec<u32>,
}

struct User {
    id: u32,
    gender: u32,
    age: u32,
    occupation: u32,
}

pub fn rating_label(rating: u32) -> u8 {
    u8::from(rating >= 4)
}

/// Loads the three files. Vocabularies are dense with index 0 reserved in
/// every field and assigned in file order; instances follow `ratings.dat`.
pub fn load_movielens(ratings: &Path, movies: &Path, users: &Path) -> Result<Dataset> {
    let (mut movie_ids, mut titles, mut years, mut genres) = (Vocab::new(), Vocab::new(), Vocab::new(), Vocab::new());
    let mut movie_table: HashMap<u32, Movie> = HashMap::new();
    let text = read_latin1(movies)?;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let [id, title, genre] = split_line(movies, i + 1, line, 3)?[..] else {
            unreachable!()
        };
        let raw: u32 = id
            .trim()
            .parse()
            .map_err(|_| parse_err(movies, i + 1, format!("bad movie id `{id}`")))?;
        movie_ids.insert(id.trim());
        let (name, year) = split_title_year(title);
        let movie = Movie {
            title: tokenize_title(name).iter().map(|t| titles.insert(t)).collect(),
            year: year.map_or(0, |y| years.insert(y)),
            genres: genre
                .split('|')
                .filter(|g| !g.is_empty())
                .map(|g| genres.insert(g))
                .collect(),
        };
        if movie_table.insert(raw, movie).is_some() {
            return Err(parse_err(movies, i + 1, format!("duplicate movie id {raw}")));
        }
    }

    let (mut user_ids, mut genders, mut ages, mut occupations) =
        (Vocab::new(), Vocab::new(), Vocab::new(), Vocab::new());
    let mut user_table: HashMap<u32, User> = HashMap::new();
    let text = read_latin1(users)?;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let [id, gender, age, occupation, _zip] = split_line(users, i + 1, line, 5)?[..] else {
            unreachable!()
        };
        let raw: u32 = id
            .trim()
            .parse()
            .map_err(|_| parse_err(users, i + 1, format!("bad user id `{id}`")))?;
        let user = User {
            id: user_ids.insert(id.trim()),
            gender: genders.insert(gender.trim()),
            age: ages.insert(age.trim()),
            occupation: occupations.insert(occupation.trim()),
        };
        if user_table.insert(raw, user).is_some() {
            return Err(parse_err(users, i + 1, format!("duplicate user id {raw}")));
        }
    }

    let text = read_latin1(ratings)?;
    let mut instances = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let [user, movie, rating, _ts] = split_line(ratings, i + 1, line, 4)?[..] else {
            unreachable!()
        };
        let parse = |s: &str, what: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| parse_err(ratings, i + 1, format!("bad {what} `{s}`")))
        };
        let (user, movie, rating) = (
            parse(user, "user id")?,
            parse(movie, "movie id")?,
            parse(rating, "rating")?,
        );
        let m = movie_table
            .get(&movie)
            .ok_or_else(|| parse_err(ratings, i + 1, format!("movie {movie} not in {}", movies.display())))?;
        let u = user_table
            .get(&user)
            .ok_or_else(|| parse_err(ratings, i + 1, format!("user {user} not in {}", users.display())))?;
        instances.push(Instance {
            features: vec![
                FieldValue::Cat(
                    movie_ids
                        .get(&movie.to_string())
                        .expect("movie vocab covers movie table"),
                ),
                FieldValue::Tokens(m.title.clone()),
                FieldValue::Cat(m.year),
                FieldValue::Tokens(m.genres.clone()),
                FieldValue::Cat(u.id),
                FieldValue::Cat(u.age),
                FieldValue::Cat(u.gender),
                FieldValue::Cat(u.occupation),
            ],
            label: rating_label(rating),
        });
    }

    use FieldGroup::*;
    use FieldKind::*;
    let spec = |i: usize, kind, v: &Vocab, group| FieldSpec::new(FIELDS[i], kind, v.len(), group);
    let schema = Schema::new(vec![
        spec(0, Categorical, &movie_ids, AdId),
        spec(1, TokenList, &titles, AdFeature),
        spec(2, Categorical, &years, AdFeature),
        spec(3, TokenList, &genres, AdFeature),
        spec(4, Categorical, &user_ids, OtherFeature),
        spec(5, Categorical, &ages, OtherFeature),
        spec(6, Categorical, &genders, OtherFeature),
        spec(7, Categorical, &occupations, OtherFeature),
    ])?;
    Dataset::new(schema, instances)
}

/// Loads `ratings.dat`, `movies.dat` and `users.dat` from one directory.
pub fn load_movielens_dir(dir: &Path) -> Result<Dataset> {
    load_movielens(&dir.join(RATINGS_FILE), &dir.join(MOVIES_FILE), &dir.join(USERS_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn title_year_and_tokens() {
        assert_eq!(split_title_year("Toy Story (1995)"), ("Toy Story", Some("1995")));
        assert_eq!(
            split_title_year("City of Lost Children, The (Cité des enfants perdus, La) (1995)").1,
            Some("1995")
        );
        assert_eq!(split_title_year("No Year"), ("No Year", None));
        assert_eq!(
            tokenize_title("Dr. Strangelove, or: How I Learned"),
            ["dr", "strangelove", "or", "how", "i", "learned"]
        );
    }

    #[test]
    fn binarization() {
        assert_eq!(rating_label(5), 1);
        assert_eq!(rating_label(4), 1);
        assert_eq!(rating_label(3), 0);
        assert_eq!(rating_label(1), 0);
    }
}
